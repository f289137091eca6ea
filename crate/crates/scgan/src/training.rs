//! Quad sampling, Adam optimization, and the alternating training loop.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{load_checkpoint, round_tensor_to_f32, save_checkpoint, Dataset};
use crate::losses::{
    code_cycle_objective, lsgan_d_loss, quad_objective, GeneratorLossTerms, LossStages,
    LossWeights,
};
use crate::networks::{
    stack_codes, Discriminator, Encoder, Generator, GeneratorConfig, LatentCode, LossNetwork,
};
use crate::rng::{init_slot, stream, Purpose};
use crate::tensor::{Tape, Tensor, TensorId};
use crate::{Error, Result};

/// Four latent codes built from two content and two style draws. `z11` and
/// `z12` share the first content code, `z21`/`z22` the second; `z11`/`z21`
/// share the first style code, `z12`/`z22` the second — bit-exactly.
#[derive(Debug, Clone)]
pub struct QuadBatch {
    pub z11: LatentCode,
    pub z12: LatentCode,
    pub z21: LatentCode,
    pub z22: LatentCode,
}

impl QuadBatch {
    pub fn new(c1: Tensor, c2: Tensor, s1: Tensor, s2: Tensor) -> Result<Self> {
        let quad = QuadBatch {
            z11: LatentCode::new(c1.clone(), s1.clone())?,
            z12: LatentCode::new(c1, s2.clone())?,
            z21: LatentCode::new(c2.clone(), s1)?,
            z22: LatentCode::new(c2, s2)?,
        };
        quad.validate()?;
        Ok(quad)
    }

    /// The four codes in the canonical image order `z11, z12, z21, z22`.
    pub fn codes(&self) -> [LatentCode; 4] {
        [
            self.z11.clone(),
            self.z12.clone(),
            self.z21.clone(),
            self.z22.clone(),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let pairs: [(&Tensor, &Tensor, &str); 4] = [
            (&self.z11.content, &self.z12.content, "z11/z12 content"),
            (&self.z21.content, &self.z22.content, "z21/z22 content"),
            (&self.z11.style, &self.z21.style, "z11/z21 style"),
            (&self.z12.style, &self.z22.style, "z12/z22 style"),
        ];
        for (a, b, what) in pairs {
            if a.data() != b.data() {
                return Err(Error::config(format!("quad halves {what} must match exactly")));
            }
        }
        Ok(())
    }
}

/// Draw a quad: two content codes and two style codes from `N(0, I)`,
/// redrawing on the probability-zero event that a pair collides bitwise.
pub fn sample_quad(content_dim: usize, style_dim: usize, rng: &mut impl Rng) -> Result<QuadBatch> {
    let mut draw_pair = |dim: usize| -> Result<(Tensor, Tensor)> {
        let a = Tensor::randn(&[dim], 1.0, rng)?;
        loop {
            let b = Tensor::randn(&[dim], 1.0, rng)?;
            if b.data() != a.data() {
                return Ok((a, b));
            }
        }
    };
    let (c1, c2) = draw_pair(content_dim)?;
    let (s1, s2) = draw_pair(style_dim)?;
    QuadBatch::new(c1, c2, s1, s2)
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments and step counter of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// One bias-corrected Adam update in place. The slot's step counter must
/// already be incremented for this update (first update: `step == 1`).
pub fn adam_update(param: &mut [f64], grad: &[f64], slot: &mut AdamSlot, hp: &AdamParams) -> Result<()> {
    if param.len() != grad.len() || param.len() != slot.m.len() || param.len() != slot.v.len() {
        return Err(Error::shape(format!(
            "adam shapes disagree: param {}, grad {}, m {}, v {}",
            param.len(),
            grad.len(),
            slot.m.len(),
            slot.v.len()
        )));
    }
    if slot.step == 0 {
        return Err(Error::Train("adam slot step must be incremented before updating".into()));
    }
    let bc1 = 1.0 - hp.beta1.powi(slot.step as i32);
    let bc2 = 1.0 - hp.beta2.powi(slot.step as i32);
    for i in 0..param.len() {
        slot.m[i] = hp.beta1 * slot.m[i] + (1.0 - hp.beta1) * grad[i];
        slot.v[i] = hp.beta2 * slot.v[i] + (1.0 - hp.beta2) * grad[i] * grad[i];
        let m_hat = slot.m[i] / bc1;
        let v_hat = slot.v[i] / bc2;
        param[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

/// Adam optimizer with one slot per named parameter. Parameters absent from
/// a `step` call keep their state untouched, so partial updates (e.g. a
/// network updated in two different phases) stay well-defined.
#[derive(Debug, Clone)]
pub struct Adam {
    pub hp: AdamParams,
    slots: HashMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(hp: AdamParams) -> Self {
        Adam {
            hp,
            slots: HashMap::new(),
        }
    }

    /// Apply gradients to every named trainable parameter that has an entry
    /// in `grads`. Returns how many tensors were updated.
    pub fn step(
        &mut self,
        named_params: Vec<(String, &mut Tensor)>,
        grads: &HashMap<TensorId, Vec<f64>>,
    ) -> Result<usize> {
        let mut updated = 0;
        for (name, tensor) in named_params {
            if !tensor.requires_grad() {
                continue;
            }
            let Some(grad) = grads.get(&tensor.id()) else {
                continue;
            };
            let n = tensor.numel();
            let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            });
            slot.step += 1;
            adam_update(tensor.data_mut(), grad, slot, &self.hp)
                .map_err(|e| Error::Train(format!("adam update for {name}: {e}")))?;
            tensor.validate_finite(&name).map_err(|_| {
                Error::Train(format!("parameter {name} became non-finite after update"))
            })?;
            updated += 1;
        }
        Ok(updated)
    }

    pub fn slot(&self, name: &str) -> Option<&AdamSlot> {
        self.slots.get(name)
    }

    /// Named slots in sorted order (for serialization).
    pub fn slots_sorted(&self) -> Vec<(&String, &AdamSlot)> {
        let mut v: Vec<_> = self.slots.iter().collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }

    pub fn insert_slot(&mut self, name: String, slot: AdamSlot) {
        self.slots.insert(name, slot);
    }

    /// Round every moment to `f32` precision in place (checkpoint parity).
    pub fn round_to_f32(&mut self) {
        for slot in self.slots.values_mut() {
            for x in slot.m.iter_mut().chain(slot.v.iter_mut()) {
                *x = *x as f32 as f64;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// Full configuration of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Total steps the run should reach (a resumed run continues toward the
    /// same total).
    pub steps: u64,
    /// Latent quadruples per step. Image batches are four times this.
    pub quads_per_step: usize,
    /// Master seed. Every random draw in the run is a pure function of this
    /// seed, a purpose tag, and a step/epoch index.
    pub seed: u64,
    pub generator: GeneratorConfig,
    /// Base channel width of the discriminator.
    pub disc_channels: usize,
    /// Base channel width of both encoders.
    pub encoder_channels: usize,
    pub weights: LossWeights,
    pub stages: LossStages,
    pub adam: AdamParams,
    /// Scale on the generator's share of the code-reconstruction update.
    /// Adam is invariant to gradient scale, so this is applied to the
    /// learning rate of a dedicated optimizer instance instead.
    pub cycle_weight: f64,
    /// Train the encoders (and give the generator its cycle update).
    pub train_encoders: bool,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            quads_per_step: 4,
            seed: 1,
            generator: GeneratorConfig::default(),
            disc_channels: 64,
            encoder_channels: 64,
            weights: LossWeights::default(),
            stages: LossStages::default(),
            adam: AdamParams::default(),
            cycle_weight: 0.1,
            train_encoders: true,
            checkpoint_interval: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.quads_per_step == 0 {
            return Err(Error::config("quads_per_step must be at least 1"));
        }
        if self.disc_channels == 0 || self.encoder_channels == 0 {
            return Err(Error::config("channel widths must be positive"));
        }
        if !self.cycle_weight.is_finite() || self.cycle_weight < 0.0 {
            return Err(Error::config("cycle_weight must be finite and non-negative"));
        }
        self.generator.validate()?;
        self.weights.validate()?;
        let mut stages = self.stages.style.clone();
        stages.push(self.stages.content);
        for l in stages {
            if l == 0 || !self.generator.image_size.is_multiple_of(1usize << l) {
                return Err(Error::config(format!(
                    "feature stage {l} needs the image size to be divisible by {}",
                    1usize << l
                )));
            }
        }
        Ok(())
    }

    /// Images per discriminator/generator batch: four per quad.
    pub fn batch_size(&self) -> usize {
        4 * self.quads_per_step
    }
}

/// Per-term values of one completed step. `step` is 1-based; the cycle terms
/// are zero when encoder training is disabled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub d_loss: f64,
    pub terms: GeneratorLossTerms,
    pub cycle_content: f64,
    pub cycle_style: f64,
}

/// Column header of the metrics log. Loss columns hold weighted values, so
/// the five term columns sum to `total`.
pub const METRICS_HEADER: &str = "step\tadversarial\tcontent_consistency\tstyle_consistency\tstyle_diversity\tcontent_diversity\ttotal\td_loss\tcycle_content\tcycle_style";

impl StepReport {
    /// One metrics-log line. Floats use shortest round-trip formatting, so
    /// parsing the line recovers the exact values.
    pub fn metrics_line(&self, weights: &LossWeights) -> String {
        let [adv, cc, sc, sd, cd] = self.terms.weighted(weights);
        format!(
            "{}\t{adv}\t{cc}\t{sc}\t{sd}\t{cd}\t{}\t{}\t{}\t{}",
            self.step, self.terms.total, self.d_loss, self.cycle_content, self.cycle_style
        )
    }
}

/// Indices of the real minibatch for a given step: position `step % B` of a
/// permutation drawn freshly per epoch (`B` = batches per epoch, the last
/// partial batch of an epoch is dropped). A pure function of its arguments,
/// so a resumed run consumes the dataset in exactly the order the
/// uninterrupted run would have.
pub fn real_batch_indices(
    dataset_len: usize,
    batch_size: usize,
    seed: u64,
    step: u64,
) -> Result<Vec<usize>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let batches_per_epoch = (dataset_len / batch_size) as u64;
    if batches_per_epoch == 0 {
        return Err(Error::config(format!(
            "dataset of {dataset_len} images cannot fill a batch of {batch_size}"
        )));
    }
    let epoch = step / batches_per_epoch;
    let pos = (step % batches_per_epoch) as usize;
    let mut perm: Vec<usize> = (0..dataset_len).collect();
    perm.shuffle(&mut stream(seed, Purpose::DataOrder, epoch));
    Ok(perm[pos * batch_size..(pos + 1) * batch_size].to_vec())
}

/// All trainable state of a run plus its five optimizers (the generator gets
/// a dedicated low-rate instance for its code-reconstruction update).
#[derive(Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub content_encoder: Encoder,
    pub style_encoder: Encoder,
    pub feature_net: LossNetwork,
    adam_g: Adam,
    adam_d: Adam,
    adam_ec: Adam,
    adam_es: Adam,
    adam_cycle: Adam,
    step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let g = &config.generator;
        let generator = Generator::new(
            g.clone(),
            &mut stream(config.seed, Purpose::Init, init_slot::GENERATOR),
        )?;
        let discriminator = Discriminator::new(
            g.image_size,
            config.disc_channels,
            &mut stream(config.seed, Purpose::Init, init_slot::DISCRIMINATOR),
        )?;
        let content_encoder = Encoder::content(
            g.image_size,
            config.encoder_channels,
            g.content_dim,
            &mut stream(config.seed, Purpose::Init, init_slot::CONTENT_ENCODER),
        )?;
        let style_encoder = Encoder::style(
            g.image_size,
            config.encoder_channels,
            g.style_dim,
            &mut stream(config.seed, Purpose::Init, init_slot::STYLE_ENCODER),
        )?;
        let cycle_hp = AdamParams {
            lr: config.adam.lr * config.cycle_weight,
            ..config.adam
        };
        Ok(Trainer {
            generator,
            discriminator,
            content_encoder,
            style_encoder,
            feature_net: LossNetwork::fixed(),
            adam_g: Adam::new(config.adam),
            adam_d: Adam::new(config.adam),
            adam_ec: Adam::new(config.adam),
            adam_es: Adam::new(config.adam),
            adam_cycle: Adam::new(cycle_hp),
            step: 0,
            config,
        })
    }

    /// Completed steps so far.
    pub fn completed_steps(&self) -> u64 {
        self.step
    }

    /// Run one full step: discriminator update, generator update, and (when
    /// enabled) the encoder/cycle update. Returns the step's loss values.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<StepReport> {
        let step = self.step; // 0-based index into the per-step streams
        let wrap = |phase: &str, e: Error| Error::Train(format!("step {}: {phase}: {e}", step + 1));

        let g = &self.config.generator;
        let mut rng = stream(self.config.seed, Purpose::Quads, step);
        let mut codes = Vec::with_capacity(self.config.batch_size());
        for _ in 0..self.config.quads_per_step {
            codes.extend(sample_quad(g.content_dim, g.style_dim, &mut rng)?.codes());
        }

        let d_loss = self
            .discriminator_phase(dataset, &codes)
            .map_err(|e| wrap("discriminator phase", e))?;
        let terms = self
            .generator_phase(&codes)
            .map_err(|e| wrap("generator phase", e))?;
        let (cycle_content, cycle_style) = if self.config.train_encoders {
            self.encoder_phase().map_err(|e| wrap("encoder phase", e))?
        } else {
            (0.0, 0.0)
        };

        self.step += 1;
        Ok(StepReport {
            step: self.step,
            d_loss,
            terms,
            cycle_content,
            cycle_style,
        })
    }

    /// Least-squares update of the discriminator on one real minibatch and
    /// one batch faked by the frozen generator (batch statistics, running
    /// stats untouched).
    fn discriminator_phase(&mut self, dataset: &Dataset, codes: &[LatentCode]) -> Result<f64> {
        let fake = {
            let mut tape = Tape::inference();
            let v = self.generator.forward_batch(&mut tape, codes)?;
            tape.to_tensor(v)?
        };
        let indices = real_batch_indices(
            dataset.len(),
            codes.len(),
            self.config.seed,
            self.step,
        )?;
        let real = dataset.batch(&indices)?;

        let mut tape = Tape::new();
        let fake_v = tape.constant(&fake);
        let real_v = tape.constant(&real);
        let fake_scores = self.discriminator.forward(&mut tape, fake_v)?;
        let real_scores = self.discriminator.forward(&mut tape, real_v)?;
        let loss = lsgan_d_loss(&mut tape, real_scores, fake_scores)?;
        let value = tape.item(loss)?;
        if !value.is_finite() {
            return Err(Error::Train("discriminator loss is not finite".into()));
        }
        tape.backward(loss)?;
        let grads = tape.grads_by_source();
        self.adam_d.step(self.discriminator.named_state_mut(), &grads)?;
        Ok(value)
    }

    /// Update the generator on the full quadruple objective. This is the one
    /// phase that commits batch-norm running statistics.
    fn generator_phase(&mut self, codes: &[LatentCode]) -> Result<GeneratorLossTerms> {
        let mut tape = Tape::new();
        let images = self.generator.forward_batch_train(&mut tape, codes)?;
        let (total, terms) = quad_objective(
            &mut tape,
            images,
            self.config.quads_per_step,
            &self.discriminator,
            &self.feature_net,
            &self.config.weights,
            &self.config.stages,
        )?;
        terms.ensure_finite()?;
        tape.backward(total)?;
        let grads = tape.grads_by_source();
        self.adam_g.step(self.generator.named_state_mut(), &grads)?;
        Ok(terms)
    }

    /// Update both encoders (and, at reduced rate, the generator) so codes
    /// survive a round trip through generated images. Uses fresh codes, twice
    /// as many as one quad batch's latent draws.
    fn encoder_phase(&mut self) -> Result<(f64, f64)> {
        let g = &self.config.generator;
        let n = 2 * self.config.quads_per_step;
        let mut rng = stream(self.config.seed, Purpose::EncoderCodes, self.step);
        let codes: Vec<LatentCode> = (0..n)
            .map(|_| LatentCode::sample(g.content_dim, g.style_dim, &mut rng))
            .collect::<Result<_>>()?;

        let mut tape = Tape::new();
        let (zc, zs) = stack_codes(&mut tape, &codes, g)?;
        let images = self.generator.forward_batch(&mut tape, &codes)?;
        let (content_loss, style_loss) = code_cycle_objective(
            &mut tape,
            zc,
            zs,
            images,
            &self.content_encoder,
            &self.style_encoder,
        )?;
        let total = tape.add(content_loss, style_loss)?;
        let content_value = tape.item(content_loss)?;
        let style_value = tape.item(style_loss)?;
        for (name, v) in [("content", content_value), ("style", style_value)] {
            if !v.is_finite() {
                return Err(Error::Train(format!(
                    "{name} code reconstruction loss is not finite"
                )));
            }
        }
        tape.backward(total)?;
        let grads = tape.grads_by_source();
        self.adam_ec.step(self.content_encoder.named_state_mut(), &grads)?;
        self.adam_es.step(self.style_encoder.named_state_mut(), &grads)?;
        if self.config.cycle_weight > 0.0 {
            self.adam_cycle.step(self.generator.named_state_mut(), &grads)?;
        }
        Ok((content_value, style_value))
    }
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

/// The file stores every value as `f32`, which represents integers up to
/// `2^24` exactly but no u64. Counters therefore serialize as four 16-bit
/// limbs (big-endian), each exact in `f32`.
fn u64_to_limbs(x: u64) -> Result<Tensor> {
    Tensor::new(
        vec![4],
        (0..4).map(|i| ((x >> (16 * (3 - i))) & 0xffff) as f64).collect(),
    )
}

fn limbs_to_u64(name: &str, t: &Tensor) -> Result<u64> {
    if t.shape() != [4] {
        return Err(Error::Train(format!(
            "checkpoint entry {name} should be a 4-limb counter, got shape {:?}",
            t.shape()
        )));
    }
    let mut out: u64 = 0;
    for &v in t.data() {
        if !v.is_finite() || v.fract() != 0.0 || !(0.0..=65535.0).contains(&v) {
            return Err(Error::Train(format!(
                "checkpoint entry {name} holds {v}, not a 16-bit limb"
            )));
        }
        out = (out << 16) | v as u64;
    }
    Ok(out)
}

/// Architecture fingerprint stored in checkpoints; all entries are small
/// integers, exact in `f32`.
fn arch_vector(config: &TrainConfig) -> Result<Tensor> {
    let g = &config.generator;
    Tensor::new(
        vec![10],
        vec![
            g.image_size as f64,
            g.base_channels as f64,
            g.content_dim as f64,
            g.style_dim as f64,
            g.split.0 as f64,
            g.split.1 as f64,
            g.split.2 as f64,
            g.mlp_hidden as f64,
            config.disc_channels as f64,
            config.encoder_channels as f64,
        ],
    )
}

const NETWORK_TAGS: [&str; 4] = ["g", "d", "ec", "es"];
const OPTIMIZER_TAGS: [&str; 5] = ["g", "d", "ec", "es", "cycle"];

impl Trainer {
    fn networks(&self) -> [(&str, Vec<(String, &Tensor)>); 4] {
        [
            ("g", self.generator.named_state()),
            ("d", self.discriminator.named_state()),
            ("ec", self.content_encoder.named_state()),
            ("es", self.style_encoder.named_state()),
        ]
    }

    fn optimizers(&self) -> [(&str, &Adam); 5] {
        [
            ("g", &self.adam_g),
            ("d", &self.adam_d),
            ("ec", &self.adam_ec),
            ("es", &self.adam_es),
            ("cycle", &self.adam_cycle),
        ]
    }

    fn optimizer_mut(&mut self, tag: &str) -> &mut Adam {
        match tag {
            "g" => &mut self.adam_g,
            "d" => &mut self.adam_d,
            "ec" => &mut self.adam_ec,
            "es" => &mut self.adam_es,
            "cycle" => &mut self.adam_cycle,
            _ => unreachable!("unknown optimizer tag {tag}"),
        }
    }

    fn checkpoint_entries(&self) -> Result<Vec<(String, Tensor)>> {
        let mut entries = vec![
            ("meta.arch".to_owned(), arch_vector(&self.config)?),
            ("meta.seed".to_owned(), u64_to_limbs(self.config.seed)?),
            ("meta.step".to_owned(), u64_to_limbs(self.step)?),
        ];
        for (tag, state) in self.networks() {
            for (name, t) in state {
                entries.push((format!("{tag}.{name}"), t.clone()));
            }
        }
        for (tag, adam) in self.optimizers() {
            for (name, slot) in adam.slots_sorted() {
                let base = format!("opt.{tag}.{name}");
                entries.push((format!("{base}.m"), Tensor::new(vec![slot.m.len()], slot.m.clone())?));
                entries.push((format!("{base}.v"), Tensor::new(vec![slot.v.len()], slot.v.clone())?));
                entries.push((format!("{base}.t"), u64_to_limbs(slot.step)?));
            }
        }
        Ok(entries)
    }

    /// Write the complete training state — parameters, running statistics,
    /// optimizer moments and counters, and the step — to one checkpoint file.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let entries = self.checkpoint_entries()?;
        let refs: Vec<(String, &Tensor)> =
            entries.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_checkpoint(path, &refs)
    }

    /// Round all live training state to `f32` precision, matching what a
    /// checkpoint stores. Calling this right after every save makes a resumed
    /// run bitwise-identical to the uninterrupted one.
    pub fn round_state_to_f32(&mut self) {
        for (_, t) in self.generator.named_state_mut() {
            round_tensor_to_f32(t);
        }
        for (_, t) in self.discriminator.named_state_mut() {
            round_tensor_to_f32(t);
        }
        for (_, t) in self.content_encoder.named_state_mut() {
            round_tensor_to_f32(t);
        }
        for (_, t) in self.style_encoder.named_state_mut() {
            round_tensor_to_f32(t);
        }
        for tag in OPTIMIZER_TAGS {
            self.optimizer_mut(tag).round_to_f32();
        }
    }

    /// Rebuild a trainer from `config` and a checkpoint written by a run with
    /// the same architecture and seed. Every entry must be consumed; leftover
    /// or missing entries are errors, not warnings.
    pub fn resume(config: TrainConfig, path: &Path) -> Result<Trainer> {
        let mut table = load_checkpoint(path)?;
        let take = |table: &mut BTreeMap<String, Tensor>, key: &str| -> Result<Tensor> {
            table
                .remove(key)
                .ok_or_else(|| Error::Train(format!("checkpoint is missing entry {key}")))
        };

        let mut trainer = Trainer::new(config)?;

        let arch = take(&mut table, "meta.arch")?;
        let want = arch_vector(&trainer.config)?;
        if arch.data() != want.data() {
            return Err(Error::Train(
                "checkpoint was written for a different architecture".into(),
            ));
        }
        let seed = limbs_to_u64("meta.seed", &take(&mut table, "meta.seed")?)?;
        if seed != trainer.config.seed {
            return Err(Error::Train(format!(
                "checkpoint seed {seed} does not match configured seed {}",
                trainer.config.seed
            )));
        }
        trainer.step = limbs_to_u64("meta.step", &take(&mut table, "meta.step")?)?;

        for tag in NETWORK_TAGS {
            let state = match tag {
                "g" => trainer.generator.named_state_mut(),
                "d" => trainer.discriminator.named_state_mut(),
                "ec" => trainer.content_encoder.named_state_mut(),
                "es" => trainer.style_encoder.named_state_mut(),
                _ => unreachable!(),
            };
            for (name, live) in state {
                let key = format!("{tag}.{name}");
                let loaded = take(&mut table, &key)?;
                if loaded.shape() != live.shape() {
                    return Err(Error::Train(format!(
                        "checkpoint entry {key} has shape {:?}, expected {:?}",
                        loaded.shape(),
                        live.shape()
                    )));
                }
                live.data_mut().copy_from_slice(loaded.data());
            }
        }

        for tag in OPTIMIZER_TAGS {
            let prefix = format!("opt.{tag}.");
            let names: Vec<String> = table
                .keys()
                .filter_map(|k| k.strip_prefix(&prefix))
                .filter_map(|r| r.strip_suffix(".m"))
                .map(str::to_owned)
                .collect();
            for name in names {
                let m = take(&mut table, &format!("{prefix}{name}.m"))?;
                let v = take(&mut table, &format!("{prefix}{name}.v"))?;
                let t_key = format!("{prefix}{name}.t");
                let step = limbs_to_u64(&t_key, &take(&mut table, &t_key)?)?;
                if m.numel() != v.numel() {
                    return Err(Error::Train(format!(
                        "optimizer moments for {prefix}{name} disagree in length"
                    )));
                }
                trainer.optimizer_mut(tag).insert_slot(
                    name,
                    AdamSlot {
                        m: m.data().to_vec(),
                        v: v.data().to_vec(),
                        step,
                    },
                );
            }
        }

        if !table.is_empty() {
            let leftovers: Vec<&String> = table.keys().take(4).collect();
            return Err(Error::Train(format!(
                "checkpoint holds {} entries this configuration does not use, e.g. {leftovers:?}",
                table.len()
            )));
        }
        Ok(trainer)
    }

    /// Load a checkpoint without knowing how the run was configured: the
    /// architecture and seed are read back from the checkpoint's own
    /// metadata and override the corresponding fields of `base`. The
    /// remaining fields of `base` (loss weights, learning rate, step total,
    /// ...) only matter if training continues.
    pub fn from_checkpoint(path: &Path, base: TrainConfig) -> Result<Trainer> {
        let table = load_checkpoint(path)?;
        let arch = table
            .get("meta.arch")
            .ok_or_else(|| Error::Train("checkpoint is missing entry meta.arch".into()))?;
        if arch.shape() != [10] {
            return Err(Error::Train(format!(
                "checkpoint entry meta.arch has shape {:?}, expected [10]",
                arch.shape()
            )));
        }
        let dim = |i: usize| -> Result<usize> {
            let v = arch.data()[i];
            if !v.is_finite() || v.fract() != 0.0 || !(1.0..=65536.0).contains(&v) {
                return Err(Error::Train(format!(
                    "checkpoint entry meta.arch[{i}] holds {v}, not a dimension"
                )));
            }
            Ok(v as usize)
        };
        let seed = table
            .get("meta.seed")
            .ok_or_else(|| Error::Train("checkpoint is missing entry meta.seed".into()))?;
        let config = TrainConfig {
            seed: limbs_to_u64("meta.seed", seed)?,
            generator: GeneratorConfig {
                image_size: dim(0)?,
                base_channels: dim(1)?,
                content_dim: dim(2)?,
                style_dim: dim(3)?,
                split: (dim(4)?, dim(5)?, dim(6)?),
                mlp_hidden: dim(7)?,
            },
            disc_channels: dim(8)?,
            encoder_channels: dim(9)?,
            ..base
        };
        Trainer::resume(config, path)
    }
}

// ---------------------------------------------------------------------------
// Run loop
// ---------------------------------------------------------------------------

/// File name of the checkpoint written after `step` completed steps.
pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint-{step:06}.scgn")
}

/// Name of the checkpoint written when a run reaches its configured total.
pub const FINAL_CHECKPOINT: &str = "checkpoint-final.scgn";

/// Name of the per-step metrics log inside the run directory.
pub const METRICS_FILE: &str = "metrics.tsv";

/// What a finished run leaves on disk, plus the per-step reports.
#[derive(Debug)]
pub struct RunSummary {
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub reports: Vec<StepReport>,
}

/// Drive `trainer` to its configured step total, appending one metrics line
/// per step and checkpointing at the configured interval plus once at the
/// end. Live state is rounded to `f32` after every save, so an interrupted
/// run resumed from any checkpoint replays the exact remaining trajectory.
/// On error, checkpoints already on disk are left in place.
pub fn run_training(trainer: &mut Trainer, dataset: &Dataset, out_dir: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let fresh = trainer.step == 0;
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;
    let mut log = io::BufWriter::new(file);
    if fresh {
        writeln!(log, "{METRICS_HEADER}")?;
    }

    let mut reports = Vec::new();
    while trainer.step < trainer.config.steps {
        let report = trainer.train_step(dataset)?;
        writeln!(log, "{}", report.metrics_line(&trainer.config.weights))?;
        log.flush()?;
        let interval = trainer.config.checkpoint_interval;
        if interval > 0 && report.step % interval == 0 && report.step < trainer.config.steps {
            trainer.save_checkpoint(&out_dir.join(checkpoint_name(report.step)))?;
            trainer.round_state_to_f32();
        }
        reports.push(report);
    }

    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    trainer.save_checkpoint(&final_checkpoint)?;
    trainer.round_state_to_f32();
    Ok(RunSummary {
        metrics_path,
        final_checkpoint,
        reports,
    })
}


#[cfg(test)]
mod trainer_tests {
    use super::*;
    use crate::data::{DatasetItem, SyntheticSpec};
    use tempfile::tempdir;

    /// Smallest configuration the architecture supports: 8x8 images, split
    /// (1,1,1), thin networks. Stage 3 features at 8x8 are 1x1 maps.
    fn mini_config(steps: u64, interval: u64) -> TrainConfig {
        TrainConfig {
            steps,
            quads_per_step: 1,
            seed: 11,
            generator: GeneratorConfig {
                image_size: 8,
                base_channels: 4,
                content_dim: 6,
                style_dim: 3,
                split: (1, 1, 1),
                mlp_hidden: 8,
            },
            disc_channels: 4,
            encoder_channels: 4,
            stages: LossStages {
                content: 2,
                style: vec![1, 2],
            },
            checkpoint_interval: interval,
            ..TrainConfig::default()
        }
    }

    /// In-memory dataset of random pixel noise in [-1, 1]; the factor specs
    /// are arbitrary valid draws (nothing here inspects them).
    fn mini_dataset(n: usize, size: usize, seed: u64) -> Dataset {
        let mut rng = stream(seed, Purpose::DatasetSpec, 999);
        let items = (0..n)
            .map(|_| {
                let data: Vec<f64> = (0..3 * size * size)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect();
                DatasetItem {
                    spec: SyntheticSpec::sample(&mut rng),
                    image: Tensor::new(vec![3, size, size], data).unwrap(),
                }
            })
            .collect();
        Dataset {
            image_size: size,
            items,
        }
    }

    fn full_state(t: &Trainer) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (tag, state) in t.networks() {
            for (name, tensor) in state {
                out.push((format!("{tag}.{name}"), tensor.data().to_vec()));
            }
        }
        out
    }

    #[test]
    fn counter_limbs_round_trip() {
        for x in [0u64, 1, 65_535, 65_536, 20_000, u64::MAX, (1 << 53) + 7] {
            let mut t = u64_to_limbs(x).unwrap();
            round_tensor_to_f32(&mut t);
            assert_eq!(limbs_to_u64("meta.step", &t).unwrap(), x);
        }
        let bad = Tensor::new(vec![4], vec![0.5, 0.0, 0.0, 0.0]).unwrap();
        assert!(limbs_to_u64("meta.step", &bad).is_err());
    }

    #[test]
    fn real_batches_partition_each_epoch() {
        let len = 13;
        let bs = 4; // 3 batches per epoch, one leftover index dropped
        let mut epoch0: Vec<usize> = Vec::new();
        for step in 0..3 {
            epoch0.extend(real_batch_indices(len, bs, 7, step).unwrap());
        }
        let mut sorted = epoch0.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 12, "no index repeats within an epoch");
        // Same step, same indices; next epoch reshuffles.
        assert_eq!(
            real_batch_indices(len, bs, 7, 1).unwrap(),
            real_batch_indices(len, bs, 7, 1).unwrap()
        );
        let epoch1: Vec<usize> = (3..6)
            .flat_map(|s| real_batch_indices(len, bs, 7, s).unwrap())
            .collect();
        assert_ne!(epoch0, epoch1);
        assert!(real_batch_indices(3, 4, 7, 0).is_err(), "dataset smaller than a batch");
    }

    #[test]
    fn phases_touch_disjoint_state() {
        let dataset = mini_dataset(6, 8, 3);
        let mut t = Trainer::new(mini_config(1, 0)).unwrap();
        let g = &t.config.generator;
        let mut rng = stream(t.config.seed, Purpose::Quads, 0);
        let codes = sample_quad(g.content_dim, g.style_dim, &mut rng)
            .unwrap()
            .codes();

        let before = full_state(&t);
        t.discriminator_phase(&dataset, &codes).unwrap();
        let after_d = full_state(&t);
        for ((name, was), (_, is)) in before.iter().zip(&after_d) {
            if name.starts_with("d.") {
                continue;
            }
            assert_eq!(was, is, "{name} must not move in the discriminator phase");
        }
        assert_ne!(before, after_d, "discriminator parameters must move");

        t.generator_phase(&codes).unwrap();
        let after_g = full_state(&t);
        let mut g_moved = false;
        for ((name, was), (_, is)) in after_d.iter().zip(&after_g) {
            if name.starts_with("g.") {
                g_moved |= was != is;
            } else {
                assert_eq!(was, is, "{name} must not move in the generator phase");
            }
        }
        assert!(g_moved);

        t.encoder_phase().unwrap();
        let after_e = full_state(&t);
        let (mut ec_moved, mut es_moved, mut g_cycled) = (false, false, false);
        for ((name, was), (_, is)) in after_g.iter().zip(&after_e) {
            if name.starts_with("d.") {
                assert_eq!(was, is, "{name} must not move in the encoder phase");
            } else if name.starts_with("g.running") || name.contains("running_") {
                assert_eq!(was, is, "{name}: encoder phase must not commit batch stats");
            } else {
                ec_moved |= name.starts_with("ec.") && was != is;
                es_moved |= name.starts_with("es.") && was != is;
                g_cycled |= name.starts_with("g.") && was != is;
            }
        }
        assert!(ec_moved && es_moved && g_cycled);
    }

    #[test]
    fn encoder_phase_leaves_generator_alone_at_zero_cycle_weight() {
        let mut config = mini_config(1, 0);
        config.cycle_weight = 0.0;
        let mut t = Trainer::new(config).unwrap();
        let before = full_state(&t);
        t.encoder_phase().unwrap();
        for ((name, was), (_, is)) in before.iter().zip(&full_state(&t)) {
            if name.starts_with("g.") || name.starts_with("d.") {
                assert_eq!(was, is, "{name}");
            }
        }
    }

    #[test]
    fn generator_step_descends_its_adversarial_objective() {
        let mut config = mini_config(1, 0);
        // Adversarial term only: everything else weighted to zero.
        config.weights = LossWeights {
            lambda_d: 0.5,
            lambda_cc: 0.0,
            lambda_sc: 0.0,
            lambda_sd: 0.0,
            lambda_cd: 0.0,
            ..config.weights
        };
        let mut t = Trainer::new(config).unwrap();
        let g = &t.config.generator;
        let mut rng = stream(t.config.seed, Purpose::Quads, 0);
        let codes = sample_quad(g.content_dim, g.style_dim, &mut rng)
            .unwrap()
            .codes();

        let eval = |t: &Trainer| -> f64 {
            let mut tape = Tape::inference();
            let images = t.generator.forward_batch(&mut tape, &codes).unwrap();
            let (total, _) = quad_objective(
                &mut tape,
                images,
                1,
                &t.discriminator,
                &t.feature_net,
                &t.config.weights,
                &t.config.stages,
            )
            .unwrap();
            tape.item(total).unwrap()
        };

        let before = eval(&t);
        t.generator_phase(&codes).unwrap();
        let after = eval(&t);
        assert!(
            after < before,
            "one generator step against a frozen discriminator must descend: {before} -> {after}"
        );
    }

    #[test]
    fn two_runs_are_bitwise_identical() {
        let dataset = mini_dataset(9, 8, 3);
        let mut a = Trainer::new(mini_config(5, 0)).unwrap();
        let mut b = Trainer::new(mini_config(5, 0)).unwrap();
        let mut reports_a = Vec::new();
        let mut reports_b = Vec::new();
        for _ in 0..5 {
            reports_a.push(a.train_step(&dataset).unwrap());
            reports_b.push(b.train_step(&dataset).unwrap());
        }
        assert_eq!(reports_a, reports_b);
        assert_eq!(full_state(&a), full_state(&b));
        for ((tag, oa), (_, ob)) in a.optimizers().iter().zip(b.optimizers().iter()) {
            let (sa, sb) = (oa.slots_sorted(), ob.slots_sorted());
            assert_eq!(sa, sb, "optimizer {tag} state must match");
        }
    }

    #[test]
    fn resume_replays_the_uninterrupted_run() {
        let dataset = mini_dataset(9, 8, 3);
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();

        let mut a = Trainer::new(mini_config(8, 4)).unwrap();
        let summary_a = run_training(&mut a, &dataset, dir_a.path()).unwrap();

        let mid = dir_a.path().join(checkpoint_name(4));
        assert!(mid.exists());
        let mut b = Trainer::resume(mini_config(8, 4), &mid).unwrap();
        assert_eq!(b.completed_steps(), 4);
        let summary_b = run_training(&mut b, &dataset, dir_b.path()).unwrap();

        assert_eq!(full_state(&a), full_state(&b));
        let file_a = fs::read(&summary_a.final_checkpoint).unwrap();
        let file_b = fs::read(&summary_b.final_checkpoint).unwrap();
        assert_eq!(file_a, file_b, "final checkpoints must be byte-identical");

        // The resumed log holds exactly the uninterrupted run's last 4 lines.
        let log_a = fs::read_to_string(&summary_a.metrics_path).unwrap();
        let log_b = fs::read_to_string(&summary_b.metrics_path).unwrap();
        let tail_a: Vec<&str> = log_a.lines().skip(5).collect();
        let lines_b: Vec<&str> = log_b.lines().collect();
        assert_eq!(tail_a, lines_b);
    }

    #[test]
    fn run_writes_log_and_checkpoints_that_recompose() {
        let dataset = mini_dataset(6, 8, 3);
        let dir = tempdir().unwrap();
        let mut t = Trainer::new(mini_config(3, 2)).unwrap();
        let summary = run_training(&mut t, &dataset, dir.path()).unwrap();

        assert_eq!(summary.reports.len(), 3);
        assert!(dir.path().join(checkpoint_name(2)).exists());
        assert!(summary.final_checkpoint.exists());

        let log = fs::read_to_string(&summary.metrics_path).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 4);
        for (i, line) in lines[1..].iter().enumerate() {
            let cols: Vec<f64> = line
                .split('\t')
                .map(|c| c.parse::<f64>().unwrap())
                .collect();
            assert_eq!(cols.len(), 10);
            assert_eq!(cols[0] as u64, i as u64 + 1);
            let total: f64 = cols[1..6].iter().sum();
            assert!(
                (total - cols[6]).abs() < 1e-8,
                "weighted terms must recompose the total: {line}"
            );
            for &c in &cols[6..] {
                assert!(c.is_finite());
            }
        }
    }

    #[test]
    fn resume_rejects_wrong_architecture_seed_or_leftovers() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("state.scgn");
        let t = Trainer::new(mini_config(1, 0)).unwrap();
        t.save_checkpoint(&path).unwrap();

        let mut wrong_arch = mini_config(1, 0);
        wrong_arch.disc_channels = 8;
        let err = Trainer::resume(wrong_arch, &path).unwrap_err();
        assert!(err.to_string().contains("architecture"), "{err}");

        let mut wrong_seed = mini_config(1, 0);
        wrong_seed.seed = 12;
        let err = Trainer::resume(wrong_seed, &path).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");

        // A fresh save/resume round trip restores the exact f32-rounded state.
        let mut t2 = Trainer::new(mini_config(1, 0)).unwrap();
        t2.round_state_to_f32();
        let resumed = Trainer::resume(mini_config(1, 0), &path).unwrap();
        assert_eq!(full_state(&t2), full_state(&resumed));
    }
}
