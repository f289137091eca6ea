//! End-to-end tests of the command-line binary: every command runs as a
//! subprocess against a tiny dataset and model, and outputs are checked
//! byte-for-byte where the contract is bitwise.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scgan::config::RunConfig;
use scgan::data::{grid, read_ppm, ImageBuffer};
use scgan::networks::LatentCode;
use scgan::rng::{stream, Purpose};
use scgan::training::Trainer;
use scgan::Tensor;

fn scgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scgan"))
        .args(args)
        .output()
        .expect("spawning the binary")
}

fn ok(args: &[&str]) -> String {
    let out = scgan(args);
    assert!(
        out.status.success(),
        "scgan {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("stdout is text")
}

/// Settings that make a 32x32 run finish in well under a second.
const TINY: &[&str] = &[
    "--set",
    "base_channels=8",
    "--set",
    "content_dim=8",
    "--set",
    "style_dim=4",
    "--set",
    "mlp_hidden=16",
    "--set",
    "disc_channels=8",
    "--set",
    "encoder_channels=8",
    "--set",
    "quads_per_step=1",
];

fn gen_dataset(dir: &Path, count: usize) -> PathBuf {
    let data = dir.join("data");
    ok(&[
        "dataset-gen",
        "--out",
        data.to_str().unwrap(),
        "--count",
        &count.to_string(),
        "--seed",
        "11",
    ]);
    data.join("manifest.tsv")
}

fn train_tiny(manifest: &Path, out: &Path, steps: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec![
        "train",
        "--data",
        manifest.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--steps",
        steps,
        "--seed",
        "11",
    ];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args);
    out.join("checkpoint-final.scgn")
}

#[test]
fn one_step_training_run_logs_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 8);
    train_tiny(&manifest, &dir.path().join("run"), "1", &[]);
    let log = std::fs::read_to_string(dir.path().join("run/metrics.tsv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2, "header plus exactly one step:\n{log}");
    assert!(lines[0].starts_with("step\t"));
    assert!(lines[1].starts_with("1\t"));
}

#[test]
fn figure_grid_has_the_requested_layout_and_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 8);
    let ckpt = train_tiny(&manifest, &dir.path().join("run"), "1", &[]);
    let out = dir.path().join("figure.ppm");
    ok(&[
        "grid",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--rows",
        "4",
        "--cols",
        "6",
        "--seed",
        "11",
    ]);
    let image = read_ppm(&out).unwrap();
    // 6 columns of 32px tiles with 2px separators; 4 rows likewise.
    assert_eq!((image.width, image.height), (6 * 32 + 5 * 2, 4 * 32 + 3 * 2));

    // The figure is exactly what the library produces for the same seed:
    // row r fixes a content code, column c fixes a style code.
    let trainer = Trainer::from_checkpoint(&ckpt, RunConfig::default().train).unwrap();
    let g = &trainer.generator;
    let mut rng = stream(11, Purpose::Sampling, 1);
    let contents: Vec<Tensor> = (0..4)
        .map(|_| Tensor::randn(&[g.config.content_dim], 1.0, &mut rng).unwrap())
        .collect();
    let styles: Vec<Tensor> = (0..6)
        .map(|_| Tensor::randn(&[g.config.style_dim], 1.0, &mut rng).unwrap())
        .collect();
    let mut codes = Vec::new();
    for content in &contents {
        for style in &styles {
            codes.push(LatentCode::new(content.clone(), style.clone()).unwrap());
        }
    }
    let batch = g.render_batch(&codes).unwrap();
    let plane = 3 * 32 * 32;
    let tiles: Vec<ImageBuffer> = (0..24)
        .map(|i| {
            let cell = Tensor::new(
                vec![3, 32, 32],
                batch.data()[i * plane..(i + 1) * plane].to_vec(),
            )
            .unwrap();
            ImageBuffer::from_tensor(&cell).unwrap()
        })
        .collect();
    let want = grid(&tiles, 4, 6).unwrap();
    assert_eq!(image.pixels, want.pixels, "CLI figure differs from library render");
}

#[test]
fn eval_reports_a_finite_distribution_distance() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 30);
    let ckpt = train_tiny(&manifest, &dir.path().join("run"), "1", &[]);
    let stdout = ok(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        manifest.to_str().unwrap(),
        "--fid-samples",
        "100",
        "--diversity-pairs",
        "3",
        "--probe-pairs",
        "3",
        "--seed",
        "11",
    ]);
    let fid_line = stdout
        .lines()
        .find(|l| l.starts_with("fid\t"))
        .unwrap_or_else(|| panic!("no fid field in:\n{stdout}"));
    let fid: f64 = fid_line.split('\t').nth(1).unwrap().parse().unwrap();
    assert!(fid.is_finite() && fid >= 0.0, "fid = {fid}");
    // 100 requested samples clamp to the 30 available.
    assert!(stdout.contains("fid_samples\t30"), "{stdout}");
}

#[test]
fn fixed_seed_reproduces_training_and_sampling_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 8);
    let ckpt_a = train_tiny(&manifest, &dir.path().join("a"), "2", &[]);
    let ckpt_b = train_tiny(&manifest, &dir.path().join("b"), "2", &[]);
    assert_eq!(
        std::fs::read(&ckpt_a).unwrap(),
        std::fs::read(&ckpt_b).unwrap(),
        "same seed and settings must give identical checkpoints"
    );
    for out in ["s1.ppm", "s2.ppm"] {
        ok(&[
            "generate",
            "--checkpoint",
            ckpt_a.to_str().unwrap(),
            "--out",
            dir.path().join(out).to_str().unwrap(),
            "--rows",
            "2",
            "--cols",
            "2",
            "--seed",
            "3",
        ]);
    }
    assert_eq!(
        std::fs::read(dir.path().join("s1.ppm")).unwrap(),
        std::fs::read(dir.path().join("s2.ppm")).unwrap()
    );
}

#[test]
fn style_transfer_tiles_the_reference_and_its_renders() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 8);
    let ckpt = train_tiny(&manifest, &dir.path().join("run"), "1", &[]);
    let out = dir.path().join("st.ppm");
    ok(&[
        "style-transfer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--reference",
        dir.path().join("data/img-00000.ppm").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--count",
        "3",
        "--seed",
        "11",
    ]);
    let image = read_ppm(&out).unwrap();
    assert_eq!((image.width, image.height), (4 * 32 + 3 * 2, 32));
    // First tile is the untouched reference.
    let reference = read_ppm(&dir.path().join("data/img-00000.ppm")).unwrap();
    for y in 0..32 {
        for x in 0..32 {
            for c in 0..3 {
                assert_eq!(
                    image.pixels[(y * image.width + x) * 3 + c],
                    reference.pixels[(y * 32 + x) * 3 + c],
                    "reference tile altered at ({y},{x})"
                );
            }
        }
    }
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 8);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# tiny run\nsteps = 5\nbase_channels = 8\ncontent_dim = 8\nstyle_dim = 4\n\
         mlp_hidden = 16\ndisc_channels = 8\nencoder_channels = 8\nquads_per_step = 1\n",
    )
    .unwrap();
    // --steps overrides the file's 5.
    let out = dir.path().join("run");
    ok(&[
        "train",
        "--data",
        manifest.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--steps",
        "1",
        "--seed",
        "11",
    ]);
    let log = std::fs::read_to_string(out.join("metrics.tsv")).unwrap();
    assert_eq!(log.lines().count(), 2, "flag must override the file:\n{log}");
}

#[test]
fn training_continues_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 8);
    let out = dir.path().join("run");
    train_tiny(&manifest, &out, "2", &["--set", "checkpoint_interval=1"]);
    // Continue the finished 2-step run to step 3 in a fresh directory.
    let cont = dir.path().join("cont");
    let mut args = vec![
        "train",
        "--data",
        manifest.to_str().unwrap(),
        "--out",
        cont.to_str().unwrap(),
        "--steps",
        "3",
        "--seed",
        "11",
        "--resume",
    ];
    let ckpt = out.join("checkpoint-final.scgn");
    args.push(ckpt.to_str().unwrap());
    args.extend_from_slice(TINY);
    ok(&args);
    let log = std::fs::read_to_string(cont.join("metrics.tsv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 1, "resumed run appends only step 3:\n{log}");
    assert!(lines[0].starts_with("3\t"));
}

#[test]
fn bad_invocations_exit_nonzero_with_usage_or_reason() {
    let unknown = scgan(&["frobnicate"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("Usage"));

    let flag = scgan(&["describe", "--bogus"]);
    assert_eq!(flag.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&flag.stderr).contains("Usage"));

    let key = scgan(&["describe", "--set", "bogus=1"]);
    assert_eq!(key.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&key.stderr).contains("unknown setting"));

    let missing = scgan(&["eval", "--checkpoint", "/nonexistent.scgn", "--data", "/nonexistent.tsv"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn ablation_reports_a_finite_distance_per_layout() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 8);
    let out = dir.path().join("abl");
    let mut args = vec![
        "ablate",
        "--data",
        manifest.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--steps",
        "1",
        "--seed",
        "11",
        "--set",
        "fid_samples=8",
    ];
    args.extend_from_slice(TINY);
    ok(&args);
    let report = std::fs::read_to_string(out.join("ablation.tsv")).unwrap();
    let mut seen = 0;
    for line in report.lines().skip(1) {
        if line.starts_with('#') {
            continue;
        }
        let (split, fid) = line.split_once('\t').unwrap();
        assert!(["c3-r4-c1", "c2-r4-c2", "c1-r4-c3"].contains(&split), "{split}");
        let fid: f64 = fid.parse().unwrap();
        assert!(fid.is_finite() && fid >= 0.0, "{line}");
        seen += 1;
    }
    assert_eq!(seen, 3, "{report}");
}
