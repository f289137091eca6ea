//! Run configuration: one flat key/value surface shared by the config file
//! and the command line.
//!
//! Precedence is defaults < config file < command-line flags. The binary
//! applies the three layers in that order, each through [`RunConfig::set`],
//! so a key means exactly the same thing in a file and as a flag. Config
//! files are line-based `key = value` text; `#` starts a comment line.

use std::fmt::Write as _;
use std::path::Path;

use crate::evaluation::EvalConfig;
use crate::networks::GeneratorConfig;
use crate::training::TrainConfig;
use crate::{Error, Result};

/// Every setting of a run, training and evaluation alike.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Images written by dataset generation.
    pub dataset_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            dataset_size: 2000,
        }
    }
}

/// Every key `RunConfig::set` accepts, with a one-line meaning. Kept next to
/// the setter so the two cannot drift apart (a test re-applies the whole
/// table).
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for training and evaluation streams"),
    ("steps", "total training steps"),
    ("quads_per_step", "latent quadruples per step (batch is 4x this)"),
    ("image_size", "square image side in pixels"),
    ("base_channels", "generator channel width"),
    ("content_dim", "content half of the latent code"),
    ("style_dim", "style half of the latent code"),
    ("split", "generator layout, e.g. c3-r4-c1 or 3,4,1"),
    ("mlp_hidden", "width of the style mapping network"),
    ("disc_channels", "discriminator channel width"),
    ("encoder_channels", "encoder channel width"),
    ("lambda_adv", "weight of the adversarial term"),
    ("lambda_content_cycle", "weight of the content code reconstruction"),
    ("lambda_style_cycle", "weight of the style code reconstruction"),
    ("lambda_style_div", "weight of the style diversity hinge"),
    ("lambda_content_div", "weight of the content diversity hinge"),
    ("margin_style", "hinge margin of the style diversity term"),
    ("margin_content", "hinge margin of the content diversity term"),
    ("content_stage", "feature stage of the content consistency terms"),
    ("style_stages", "feature stages of the style terms, e.g. 1,2,3"),
    ("lr", "Adam learning rate"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam denominator epsilon"),
    ("cycle_weight", "generator share of the code reconstruction update"),
    ("train_encoders", "update the encoders each step (true/false)"),
    ("checkpoint_interval", "steps between checkpoints; 0 = final only"),
    ("fid_samples", "images per side of the distribution distance"),
    ("diversity_pairs", "pairs per diversity mode"),
    ("probe_pairs", "pairs per disentanglement probe category"),
    ("embed_stage", "feature stage embedding images for the distance"),
    ("feature_stages", "stages for diversity/probe features, e.g. 1,2,3,4"),
    ("dataset_size", "images written by dataset generation"),
];

/// Parse a generator layout. Accepts the compact `c3-r4-c1` notation
/// (convolution stages, residual blocks, convolution stages) and a plain
/// comma triple `3,4,1`.
pub fn parse_split(text: &str) -> Result<(usize, usize, usize)> {
    let bad = || Error::config(format!("split {text:?} is not cI-rJ-cK or I,J,K"));
    let parts: Vec<&str> = if text.contains('-') {
        text.split('-')
            .zip(["c", "r", "c"])
            .map(|(part, prefix)| part.strip_prefix(prefix).ok_or_else(bad))
            .collect::<Result<_>>()?
    } else {
        text.split(',').collect()
    };
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut nums = parts
        .iter()
        .map(|p| p.trim().parse::<usize>().map_err(|_| bad()));
    Ok((
        nums.next().unwrap()?,
        nums.next().unwrap()?,
        nums.next().unwrap()?,
    ))
}

/// Canonical rendering of a split, inverse of [`parse_split`].
pub fn format_split(split: (usize, usize, usize)) -> String {
    format!("c{}-r{}-c{}", split.0, split.1, split.2)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| {
        Error::config(format!(
            "{key} = {value:?} is not a valid {}",
            std::any::type_name::<T>()
        ))
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!(
            "{key} = {value:?} must be true or false"
        ))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let items: Result<Vec<usize>> = value
        .split(',')
        .map(|p| parse_num::<usize>(key, p))
        .collect();
    let items = items?;
    if items.is_empty() {
        return Err(Error::config(format!("{key} needs at least one entry")));
    }
    Ok(items)
}

impl RunConfig {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => {
                t.seed = parse_num(key, value)?;
                self.eval.seed = t.seed;
            }
            "steps" => t.steps = parse_num(key, value)?,
            "quads_per_step" => t.quads_per_step = parse_num(key, value)?,
            "image_size" => t.generator.image_size = parse_num(key, value)?,
            "base_channels" => t.generator.base_channels = parse_num(key, value)?,
            "content_dim" => t.generator.content_dim = parse_num(key, value)?,
            "style_dim" => t.generator.style_dim = parse_num(key, value)?,
            "split" => t.generator.split = parse_split(value.trim())?,
            "mlp_hidden" => t.generator.mlp_hidden = parse_num(key, value)?,
            "disc_channels" => t.disc_channels = parse_num(key, value)?,
            "encoder_channels" => t.encoder_channels = parse_num(key, value)?,
            "lambda_adv" => t.weights.lambda_d = parse_num(key, value)?,
            "lambda_content_cycle" => t.weights.lambda_cc = parse_num(key, value)?,
            "lambda_style_cycle" => t.weights.lambda_sc = parse_num(key, value)?,
            "lambda_style_div" => t.weights.lambda_sd = parse_num(key, value)?,
            "lambda_content_div" => t.weights.lambda_cd = parse_num(key, value)?,
            "margin_style" => t.weights.m_s = parse_num(key, value)?,
            "margin_content" => t.weights.m_c = parse_num(key, value)?,
            "content_stage" => t.stages.content = parse_num(key, value)?,
            "style_stages" => t.stages.style = parse_list(key, value)?,
            "lr" => t.adam.lr = parse_num(key, value)?,
            "beta1" => t.adam.beta1 = parse_num(key, value)?,
            "beta2" => t.adam.beta2 = parse_num(key, value)?,
            "adam_eps" => t.adam.eps = parse_num(key, value)?,
            "cycle_weight" => t.cycle_weight = parse_num(key, value)?,
            "train_encoders" => t.train_encoders = parse_bool(key, value)?,
            "checkpoint_interval" => t.checkpoint_interval = parse_num(key, value)?,
            "fid_samples" => self.eval.fid_samples = parse_num(key, value)?,
            "diversity_pairs" => self.eval.diversity_pairs = parse_num(key, value)?,
            "probe_pairs" => self.eval.probe_pairs = parse_num(key, value)?,
            "embed_stage" => self.eval.embed_stage = parse_num(key, value)?,
            "feature_stages" => self.eval.feature_stages = parse_list(key, value)?,
            "dataset_size" => self.dataset_size = parse_num(key, value)?,
            _ => {
                let known: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
                return Err(Error::config(format!(
                    "unknown setting {key:?}; valid keys: {}",
                    known.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Apply a whole config file. Lines are `key = value`; blank lines and
    /// lines starting with `#` are skipped; a key may appear once.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        let mut seen = std::collections::BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let context = |msg: String| {
                Error::config(format!("{}:{}: {msg}", path.display(), idx + 1))
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| context(format!("expected key = value, got {line:?}")))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(context(format!("duplicate setting {key:?}")));
            }
            self.set(key, value.trim())
                .map_err(|e| context(e.to_string()))?;
        }
        Ok(())
    }

    /// Render every setting as `key = value` lines that [`RunConfig::set`]
    /// parses back to an identical configuration.
    pub fn settings_table(&self) -> String {
        let list = |items: &[usize]| {
            items
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        let t = &self.train;
        let mut out = String::new();
        for (key, _) in KEYS {
            let value = match *key {
                "seed" => t.seed.to_string(),
                "steps" => t.steps.to_string(),
                "quads_per_step" => t.quads_per_step.to_string(),
                "image_size" => t.generator.image_size.to_string(),
                "base_channels" => t.generator.base_channels.to_string(),
                "content_dim" => t.generator.content_dim.to_string(),
                "style_dim" => t.generator.style_dim.to_string(),
                "split" => format_split(t.generator.split),
                "mlp_hidden" => t.generator.mlp_hidden.to_string(),
                "disc_channels" => t.disc_channels.to_string(),
                "encoder_channels" => t.encoder_channels.to_string(),
                "lambda_adv" => t.weights.lambda_d.to_string(),
                "lambda_content_cycle" => t.weights.lambda_cc.to_string(),
                "lambda_style_cycle" => t.weights.lambda_sc.to_string(),
                "lambda_style_div" => t.weights.lambda_sd.to_string(),
                "lambda_content_div" => t.weights.lambda_cd.to_string(),
                "margin_style" => t.weights.m_s.to_string(),
                "margin_content" => t.weights.m_c.to_string(),
                "content_stage" => t.stages.content.to_string(),
                "style_stages" => list(&t.stages.style),
                "lr" => t.adam.lr.to_string(),
                "beta1" => t.adam.beta1.to_string(),
                "beta2" => t.adam.beta2.to_string(),
                "adam_eps" => t.adam.eps.to_string(),
                "cycle_weight" => t.cycle_weight.to_string(),
                "train_encoders" => t.train_encoders.to_string(),
                "checkpoint_interval" => t.checkpoint_interval.to_string(),
                "fid_samples" => self.eval.fid_samples.to_string(),
                "diversity_pairs" => self.eval.diversity_pairs.to_string(),
                "probe_pairs" => self.eval.probe_pairs.to_string(),
                "embed_stage" => self.eval.embed_stage.to_string(),
                "feature_stages" => list(&self.eval.feature_stages),
                "dataset_size" => self.dataset_size.to_string(),
                _ => unreachable!("KEYS and settings_table cover the same set"),
            };
            writeln!(out, "{key} = {value}").expect("writing to a String");
        }
        out
    }

    /// The generator architecture currently configured.
    pub fn generator(&self) -> &GeneratorConfig {
        &self.train.generator
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn defaults_match_the_component_defaults() {
        let config = RunConfig::default();
        assert_eq!(config.train, TrainConfig::default());
        assert_eq!(config.eval, EvalConfig::default());
        assert_eq!(config.dataset_size, 2000);
    }

    #[test]
    fn split_accepts_both_notations() {
        assert_eq!(parse_split("c3-r4-c1").unwrap(), (3, 4, 1));
        assert_eq!(parse_split("3,4,1").unwrap(), (3, 4, 1));
        assert_eq!(parse_split("c2-r4-c2").unwrap(), (2, 4, 2));
        assert_eq!(format_split((1, 4, 3)), "c1-r4-c3");
        for bad in ["c3-r4", "r3-c4-c1", "3,4", "c3-r4-cx", "3;4;1", ""] {
            assert!(parse_split(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn file_then_flags_yields_flag_precedence() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# comment line\n\nsteps = 50\nlr = 1e-3\nsplit = c2-r4-c2\n",
        )
        .unwrap();
        let mut config = RunConfig::default();
        config.load_file(&path).unwrap();
        assert_eq!(config.train.steps, 50);
        assert_eq!(config.train.adam.lr, 1e-3);
        assert_eq!(config.train.generator.split, (2, 4, 2));
        // A later flag wins over the file.
        config.set("steps", "75").unwrap();
        assert_eq!(config.train.steps, 75);
        // Untouched settings keep their defaults.
        assert_eq!(config.train.quads_per_step, TrainConfig::default().quads_per_step);
    }

    #[test]
    fn malformed_input_is_rejected_with_context() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        let check = |text: &str, needle: &str| {
            std::fs::write(&path, text).unwrap();
            let err = RunConfig::default().load_file(&path).unwrap_err().to_string();
            assert!(err.contains(needle), "{text:?} -> {err}");
        };
        check("bogus = 1\n", "unknown setting \"bogus\"");
        check("steps 50\n", "expected key = value");
        check("steps = 50\nsteps = 60\n", "duplicate setting");
        check("steps = many\n", "not a valid");
        check("train_encoders = yes\n", "must be true or false");
        check("style_stages = \n", "not a valid");
        // Errors carry the file location.
        check("steps = 1\nbogus = 1\n", ":2:");
    }

    #[test]
    fn seed_reaches_both_training_and_evaluation() {
        let mut config = RunConfig::default();
        config.set("seed", "77").unwrap();
        assert_eq!(config.train.seed, 77);
        assert_eq!(config.eval.seed, 77);
    }

    #[test]
    fn settings_table_round_trips() {
        let mut config = RunConfig::default();
        for (key, value) in [
            ("seed", "9"),
            ("steps", "123"),
            ("split", "c1-r4-c3"),
            ("lr", "0.00035"),
            ("train_encoders", "false"),
            ("style_stages", "1,3"),
            ("feature_stages", "2,4"),
            ("margin_content", "0.75"),
        ] {
            config.set(key, value).unwrap();
        }
        let mut reparsed = RunConfig::default();
        for line in config.settings_table().lines() {
            let (key, value) = line.split_once('=').unwrap();
            reparsed.set(key.trim(), value.trim()).unwrap();
        }
        assert_eq!(config, reparsed);
        // The documented key table matches what `set` accepts.
        assert_eq!(config.settings_table().lines().count(), KEYS.len());
    }
}
