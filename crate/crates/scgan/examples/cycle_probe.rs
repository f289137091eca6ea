//! Scratch harness: norm-based style-cycle error of a checkpoint vs the
//! untrained model it started from.

use rand::Rng as _;
use scgan::networks::{Encoder, Generator, LatentCode};
use scgan::rng::{stream, Purpose};
use scgan::training::{TrainConfig, Trainer};

fn style_cycle_error(g: &Generator, e_s: &Encoder, draws: usize, seed: u64) -> f64 {
    let mut rng = stream(seed, Purpose::EvalCodes, 5);
    let mut total = 0.0;
    for _ in 0..draws {
        let code = LatentCode::sample(g.config.content_dim, g.config.style_dim, &mut rng).unwrap();
        let image = g.render(&code).unwrap();
        let rec = e_s.encode_tensor(&image).unwrap();
        let squared: f64 = rec
            .data()
            .iter()
            .zip(code.style.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += squared.sqrt();
    }
    total / draws as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = std::path::Path::new(&args[1]);
    let mut config = TrainConfig {
        steps: 20_000,
        quads_per_step: 2,
        seed: 7,
        disc_channels: 16,
        encoder_channels: 16,
        checkpoint_interval: 1000,
        ..TrainConfig::default()
    };
    config.generator.image_size = 32;
    config.generator.base_channels = 16;
    config.generator.content_dim = 32;
    config.generator.style_dim = 8;
    config.generator.mlp_hidden = 64;
    for (key, value) in args.iter().skip(2).filter_map(|a| a.split_once('=')) {
        let v: f64 = value.parse().unwrap();
        match key {
            "style_dim" => config.generator.style_dim = v as usize,
            "mlp_hidden" => config.generator.mlp_hidden = v as usize,
            "lambda_sd" => config.weights.lambda_sd = v,
            _ => panic!("unknown override {key}"),
        }
    }

    let fresh = Trainer::new(config.clone()).unwrap();
    let untrained = style_cycle_error(&fresh.generator, &fresh.style_encoder, 256, 1);

    let trained = Trainer::from_checkpoint(ckpt, config).unwrap();
    let after = style_cycle_error(&trained.generator, &trained.style_encoder, 256, 1);

    // Sanity: mean norm of a freshly sampled style code (the chance level a
    // zero-output encoder would sit at).
    let mut rng = stream(99, Purpose::EvalCodes, 6);
    let gc = &fresh.generator.config;
    let mut base = 0.0;
    for _ in 0..256 {
        let code = LatentCode::sample(gc.content_dim, gc.style_dim, &mut rng).unwrap();
        let sq: f64 = code.style.data().iter().map(|x| x * x).sum();
        base += sq.sqrt();
    }
    base /= 256.0;

    println!("untrained mean norm : {untrained:.4}");
    println!("trained mean norm   : {after:.4}");
    println!("ratio               : {:.4}", after / untrained);
    println!("(chance norm of z_s : {base:.4})");
}
