//! Deterministic RNG streams.
//!
//! Every source of randomness in a run is a ChaCha stream derived from
//! `(seed, purpose, index)`. Streams are recreated from those three values
//! whenever they are needed, so no RNG state has to be serialized: a run
//! resumed from a checkpoint at step `t` draws exactly the same numbers at
//! step `t + k` as the uninterrupted run.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes. Values are part of the reproducibility contract: keep
/// them stable, append new ones at the end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// Network parameter initialization; index selects the network.
    Init = 1,
    /// Latent quadruple sampling; index is the training step.
    Quads = 2,
    /// Dataset epoch shuffling; index is the epoch number.
    DataOrder = 3,
    /// Fresh codes for the encoder phase; index is the training step.
    EncoderCodes = 4,
    /// Latent codes drawn during evaluation; index selects the metric.
    EvalCodes = 5,
    /// Synthetic dataset image specs; index is the image number.
    DatasetSpec = 6,
    /// Codes drawn by CLI sampling commands.
    Sampling = 7,
}

/// Index of a network within the `Init` purpose.
pub mod init_slot {
    pub const GENERATOR: u64 = 0;
    pub const DISCRIMINATOR: u64 = 1;
    pub const CONTENT_ENCODER: u64 = 2;
    pub const STYLE_ENCODER: u64 = 3;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the ChaCha stream for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let a = splitmix64(seed ^ ((purpose as u64) << 32));
    let b = splitmix64(a ^ index);
    ChaCha8Rng::seed_from_u64(splitmix64(b))
}
