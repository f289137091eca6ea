//! Training objectives.
//!
//! The generator objective combines five terms computed on the four images
//! of a quad (two content codes crossed with two style codes):
//!
//! * adversarial: least-squares GAN generator term on all four images;
//! * content consistency: feature distance between same-content pairs;
//! * style consistency: Gram-matrix distance between same-style pairs;
//! * style diversity: hinge that pushes same-content pairs at least a
//!   margin apart in Gram distance;
//! * content diversity: hinge that pushes same-style pairs at least a
//!   margin apart in feature distance.
//!
//! Feature and Gram distances are measured with the fixed feature network;
//! its inputs are rescaled from the generator's `[-1, 1]` range to `[0, 1]`
//! first. The discriminator consumes `[-1, 1]` images directly.
//!
//! Encoders train against a code cycle-consistency objective: the squared
//! distance between a latent code and its reconstruction by the encoders
//! from the generated image.

use crate::networks::{Discriminator, Encoder, Generator, LatentCode, LossNetwork};
use crate::tensor::{Tape, Tensor, Var};
use crate::training::QuadBatch;
use crate::{Error, Result};

/// Feature stage measuring content distances.
pub const CONTENT_STAGE: usize = 3;

/// Feature stages whose Gram matrices measure style distances.
pub const STYLE_STAGES: [usize; 4] = [1, 2, 3, 4];

/// Images per quad, in the fixed order `z11, z12, z21, z22` where the
/// first digit indexes the content code and the second the style code.
pub const QUAD_IMAGES: usize = 4;

/// Term weights and hinge margins of the generator objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_cc: f64,
    pub lambda_sc: f64,
    pub lambda_sd: f64,
    pub lambda_cd: f64,
    pub m_s: f64,
    pub m_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_d: 0.5,
            lambda_cc: 1.0,
            lambda_sc: 4.0,
            lambda_sd: 1.0,
            lambda_cd: 1.0,
            m_s: 1.0,
            m_c: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_d", self.lambda_d),
            ("lambda_cc", self.lambda_cc),
            ("lambda_sc", self.lambda_sc),
            ("lambda_sd", self.lambda_sd),
            ("lambda_cd", self.lambda_cd),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be a finite nonnegative value")));
            }
        }
        for (name, v) in [("m_s", self.m_s), ("m_c", self.m_c)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::config(format!("{name} must be a positive margin")));
            }
        }
        Ok(())
    }
}

/// Which feature stages the distance terms use. The defaults need images of
/// at least 16x16; smaller inputs must drop the deeper stages.
#[derive(Debug, Clone, PartialEq)]
pub struct LossStages {
    pub content: usize,
    pub style: Vec<usize>,
}

impl Default for LossStages {
    fn default() -> Self {
        LossStages {
            content: CONTENT_STAGE,
            style: STYLE_STAGES.to_vec(),
        }
    }
}

impl LossStages {
    /// Sorted union of every stage any term needs.
    fn union(&self) -> Vec<usize> {
        let mut all = self.style.clone();
        all.push(self.content);
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// Normalized channel co-activation matrix of one feature map.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    /// `[C, C]` matrix, `Psi Psi^T / normalizer`.
    pub values: Tensor,
    /// Feature stage the input came from.
    pub stage: usize,
    /// `C * H * W` of the input feature map.
    pub normalizer: usize,
}

/// Gram matrix of a single feature map `[1, C, H, W]`.
pub fn gram_matrix(features: &Tensor, stage: usize) -> Result<GramMatrix> {
    let shape = features.shape().to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::shape(format!("gram wants [1,C,H,W] features, got {shape:?}")));
    }
    let mut tape = Tape::inference();
    let f = tape.constant(features);
    let g = tape.gram(f)?;
    Ok(GramMatrix {
        values: tape.to_tensor(g)?,
        stage,
        normalizer: shape[1] * shape[2] * shape[3],
    })
}

// ---------------------------------------------------------------------------
// Tape-level builders (shared by training steps and the public wrappers)
// ---------------------------------------------------------------------------

/// Map a `[-1, 1]` image onto the `[0, 1]` range the feature network sees.
pub fn to_unit_range(tape: &mut Tape, image: Var) -> Result<Var> {
    tape.affine(image, 0.5, 0.5)
}

/// Mean squared feature distance: `sum((a - b)^2) / (C*H*W)` for a pair of
/// equally shaped single-image feature maps `[1, C, H, W]`.
pub fn feature_mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let shape = tape.shape(a).to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::shape(format!("feature pair wants [1,C,H,W], got {shape:?}")));
    }
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum_all(sq)?;
    let n = (shape[1] * shape[2] * shape[3]) as f64;
    tape.affine(s, 1.0 / n, 0.0)
}

/// Squared Frobenius distance between two Gram matrices on the tape.
pub fn gram_frobenius_sq(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    tape.sum_all(sq)
}

/// Margin hinge `max(0, margin - distance)`.
pub fn hinge(tape: &mut Tape, distance: Var, margin: f64) -> Result<Var> {
    let flipped = tape.affine(distance, -1.0, margin)?;
    tape.relu(flipped)
}

/// Least-squares discriminator loss,
/// `0.5*mean((real - 1)^2) + 0.5*mean(fake^2)`.
pub fn lsgan_d_loss(tape: &mut Tape, real_scores: Var, fake_scores: Var) -> Result<Var> {
    let rd = tape.affine(real_scores, 1.0, -1.0)?;
    let rsq = tape.mul(rd, rd)?;
    let rm = tape.mean_all(rsq)?;
    let fsq = tape.mul(fake_scores, fake_scores)?;
    let fm = tape.mean_all(fsq)?;
    let sum = tape.add(rm, fm)?;
    tape.affine(sum, 0.5, 0.0)
}

/// Least-squares generator loss, `0.5*mean((fake - 1)^2)`.
pub fn lsgan_g_loss(tape: &mut Tape, fake_scores: Var) -> Result<Var> {
    let d = tape.affine(fake_scores, 1.0, -1.0)?;
    let sq = tape.mul(d, d)?;
    let m = tape.mean_all(sq)?;
    tape.affine(m, 0.5, 0.0)
}

/// Per-term values of one generator objective evaluation. The named terms
/// are raw (unweighted); `total` is the weighted sum actually minimized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorLossTerms {
    pub adversarial: f64,
    pub content_consistency: f64,
    pub style_consistency: f64,
    pub style_diversity: f64,
    pub content_diversity: f64,
    pub total: f64,
}

impl GeneratorLossTerms {
    /// The five weighted contributions, in the order
    /// adversarial, content consistency, style consistency,
    /// style diversity, content diversity. They sum to `total`.
    pub fn weighted(&self, w: &LossWeights) -> [f64; 5] {
        [
            w.lambda_d * self.adversarial,
            w.lambda_cc * self.content_consistency,
            w.lambda_sc * self.style_consistency,
            w.lambda_sd * self.style_diversity,
            w.lambda_cd * self.content_diversity,
        ]
    }

    /// Fail with the name of the first non-finite term.
    pub fn ensure_finite(&self) -> Result<()> {
        for (name, v) in [
            ("adversarial", self.adversarial),
            ("content_consistency", self.content_consistency),
            ("style_consistency", self.style_consistency),
            ("style_diversity", self.style_diversity),
            ("content_diversity", self.content_diversity),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::Train(format!("loss term {name} is not finite ({v})")));
            }
        }
        Ok(())
    }
}

/// Per-image feature handles used by the quad objective.
struct ImageFeatures {
    content: Var,
    grams: Vec<Var>,
}

/// Build the full generator objective for a batch of quads.
///
/// `images` is the `[4*n_quads, 3, S, S]` output of the generator, grouped
/// per quad in the order `z11, z12, z21, z22` (content index first, style
/// index second). The discriminator and feature network are bound frozen:
/// gradients flow through them to the images but their own parameters
/// collect nothing. Term values are averaged over quads.
pub fn quad_objective(
    tape: &mut Tape,
    images: Var,
    n_quads: usize,
    disc: &Discriminator,
    phi: &LossNetwork,
    w: &LossWeights,
    stages: &LossStages,
) -> Result<(Var, GeneratorLossTerms)> {
    w.validate()?;
    let shape = tape.shape(images).to_vec();
    if n_quads == 0 || shape.first() != Some(&(QUAD_IMAGES * n_quads)) {
        return Err(Error::shape(format!(
            "quad batch wants [{}, 3, S, S] images for {n_quads} quads, got {shape:?}",
            QUAD_IMAGES * n_quads
        )));
    }

    // Adversarial term: per-quad sum of per-image least-squares generator
    // losses, averaged over quads = 2 * mean((score - 1)^2).
    let was_frozen = tape.frozen();
    tape.set_frozen(true);
    let scores = disc.forward(tape, images)?;
    tape.set_frozen(was_frozen);
    let sd = tape.affine(scores, 1.0, -1.0)?;
    let ssq = tape.mul(sd, sd)?;
    let smean = tape.mean_all(ssq)?;
    let adversarial = tape.affine(smean, (QUAD_IMAGES as f64) / 2.0, 0.0)?;

    // Per-image content features and style Gram matrices, extracted once.
    let unit = to_unit_range(tape, images)?;
    let union = stages.union();
    let was_frozen = tape.frozen();
    tape.set_frozen(true);
    let feats = phi.features(tape, unit, &union)?;
    tape.set_frozen(was_frozen);
    let stage_index = |stage: usize| union.iter().position(|&s| s == stage).expect("in union");
    let content_feat = feats[stage_index(stages.content)];
    let style_feats: Vec<Var> = stages.style.iter().map(|&s| feats[stage_index(s)]).collect();

    let mut per_image = Vec::with_capacity(QUAD_IMAGES * n_quads);
    for idx in 0..QUAD_IMAGES * n_quads {
        let content = tape.slice_batch(content_feat, idx)?;
        let mut grams = Vec::with_capacity(style_feats.len());
        for &f in &style_feats {
            let one = tape.slice_batch(f, idx)?;
            grams.push(tape.gram(one)?);
        }
        per_image.push(ImageFeatures { content, grams });
    }

    let content_dist = |tape: &mut Tape, a: usize, b: usize| -> Result<Var> {
        feature_mse(tape, per_image[a].content, per_image[b].content)
    };
    // Sum over quads of each raw term.
    let mut cc_sum: Option<Var> = None;
    let mut sc_sum: Option<Var> = None;
    let mut sd_sum: Option<Var> = None;
    let mut cd_sum: Option<Var> = None;
    let acc = |tape: &mut Tape, slot: &mut Option<Var>, v: Var| -> Result<()> {
        *slot = Some(match *slot {
            Some(s) => tape.add(s, v)?,
            None => v,
        });
        Ok(())
    };
    for q in 0..n_quads {
        let i11 = QUAD_IMAGES * q;
        let (i12, i21, i22) = (i11 + 1, i11 + 2, i11 + 3);
        // Content consistency: same-content pairs.
        for (a, b) in [(i11, i12), (i21, i22)] {
            let d = content_dist(tape, a, b)?;
            acc(tape, &mut cc_sum, d)?;
        }
        // Content diversity: same-style pairs, hinged feature distance.
        for (a, b) in [(i11, i21), (i12, i22)] {
            let d = content_dist(tape, a, b)?;
            let h = hinge(tape, d, w.m_c)?;
            acc(tape, &mut cd_sum, h)?;
        }
        // Style distances: Gram Frobenius distance summed over stages.
        let style_dist = |tape: &mut Tape, a: usize, b: usize| -> Result<Var> {
            let mut total: Option<Var> = None;
            for l in 0..per_image[a].grams.len() {
                let d = gram_frobenius_sq(tape, per_image[a].grams[l], per_image[b].grams[l])?;
                total = Some(match total {
                    Some(t) => tape.add(t, d)?,
                    None => d,
                });
            }
            Ok(total.expect("at least one style stage"))
        };
        // Style consistency: same-style pairs.
        for (a, b) in [(i11, i21), (i12, i22)] {
            let d = style_dist(tape, a, b)?;
            acc(tape, &mut sc_sum, d)?;
        }
        // Style diversity: same-content pairs, hinged Gram distance.
        for (a, b) in [(i11, i12), (i21, i22)] {
            let d = style_dist(tape, a, b)?;
            let h = hinge(tape, d, w.m_s)?;
            acc(tape, &mut sd_sum, h)?;
        }
    }
    let quads = n_quads as f64;
    let mean_of = |tape: &mut Tape, v: Option<Var>| -> Result<Var> {
        tape.affine(v.expect("accumulated over >= 1 quad"), 1.0 / quads, 0.0)
    };
    let cc = mean_of(tape, cc_sum)?;
    let sc = mean_of(tape, sc_sum)?;
    let sd = mean_of(tape, sd_sum)?;
    let cd = mean_of(tape, cd_sum)?;

    let mut total = tape.affine(adversarial, w.lambda_d, 0.0)?;
    for (term, lambda) in [
        (cc, w.lambda_cc),
        (sc, w.lambda_sc),
        (sd, w.lambda_sd),
        (cd, w.lambda_cd),
    ] {
        let weighted = tape.affine(term, lambda, 0.0)?;
        total = tape.add(total, weighted)?;
    }

    let terms = GeneratorLossTerms {
        adversarial: tape.item(adversarial)?,
        content_consistency: tape.item(cc)?,
        style_consistency: tape.item(sc)?,
        style_diversity: tape.item(sd)?,
        content_diversity: tape.item(cd)?,
        total: tape.item(total)?,
    };
    Ok((total, terms))
}

/// Code cycle-consistency objective for a batch: mean over the batch of the
/// squared distance between each original code half and its reconstruction
/// from the generated image. Returns `(content term, style term)`; the full
/// objective is their sum.
pub fn code_cycle_objective(
    tape: &mut Tape,
    content_codes: Var,
    style_codes: Var,
    images: Var,
    content_encoder: &Encoder,
    style_encoder: &Encoder,
) -> Result<(Var, Var)> {
    let n = tape.shape(images)[0];
    if tape.shape(content_codes)[0] != n || tape.shape(style_codes)[0] != n {
        return Err(Error::shape("code batch and image batch sizes differ"));
    }
    let half = |tape: &mut Tape, enc: &Encoder, codes: Var| -> Result<Var> {
        let rec = enc.encode(tape, images)?;
        let d = tape.sub(rec, codes)?;
        let sq = tape.mul(d, d)?;
        let s = tape.sum_all(sq)?;
        tape.affine(s, 1.0 / n as f64, 0.0)
    };
    let content_term = half(tape, content_encoder, content_codes)?;
    let style_term = half(tape, style_encoder, style_codes)?;
    Ok((content_term, style_term))
}

// ---------------------------------------------------------------------------
// Tensor-level wrappers
// ---------------------------------------------------------------------------

fn stage_features(phi: &LossNetwork, image: &Tensor, stage: usize) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let x = tape.constant(image);
    let unit = to_unit_range(&mut tape, x)?;
    let feats = phi.features(&mut tape, unit, &[stage])?;
    tape.to_tensor(feats[0])
}

fn expect_same_spatial(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::shape(format!(
            "image pair shapes differ: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    Ok(())
}

/// Feature distance between two `[1,3,S,S]` images at one stage:
/// `sum((phi_l(x) - phi_l(y))^2) / (C*H*W)`. Inputs are expected in the
/// generator's `[-1, 1]` range.
pub fn content_loss(x: &Tensor, y: &Tensor, phi: &LossNetwork, stage: usize) -> Result<f64> {
    expect_same_spatial(x, y)?;
    let fx = stage_features(phi, x, stage)?;
    let fy = stage_features(phi, y, stage)?;
    let n = fx.numel() as f64;
    Ok(fx
        .data()
        .iter()
        .zip(fy.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Squared Frobenius distance between the Gram matrices of two images at
/// one stage.
pub fn style_loss_layer(x: &Tensor, y: &Tensor, phi: &LossNetwork, stage: usize) -> Result<f64> {
    expect_same_spatial(x, y)?;
    let gx = gram_matrix(&stage_features(phi, x, stage)?, stage)?;
    let gy = gram_matrix(&stage_features(phi, y, stage)?, stage)?;
    Ok(gx
        .values
        .data()
        .iter()
        .zip(gy.values.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

fn expect_shared_content(a: &LatentCode, b: &LatentCode) -> Result<()> {
    if a.content.data() != b.content.data() {
        return Err(Error::config("pair must share the content code exactly"));
    }
    Ok(())
}

fn expect_shared_style(a: &LatentCode, b: &LatentCode) -> Result<()> {
    if a.style.data() != b.style.data() {
        return Err(Error::config("pair must share the style code exactly"));
    }
    Ok(())
}

/// Content-consistency loss of a same-content code pair.
pub fn content_consistency(
    z_a: &LatentCode,
    z_b: &LatentCode,
    g: &Generator,
    phi: &LossNetwork,
) -> Result<f64> {
    expect_shared_content(z_a, z_b)?;
    content_loss(&g.render(z_a)?, &g.render(z_b)?, phi, CONTENT_STAGE)
}

/// Style-consistency loss of a same-style code pair over a stage set.
pub fn style_consistency(
    z_a: &LatentCode,
    z_b: &LatentCode,
    g: &Generator,
    phi: &LossNetwork,
    stages: &[usize],
) -> Result<f64> {
    expect_shared_style(z_a, z_b)?;
    let (xa, xb) = (g.render(z_a)?, g.render(z_b)?);
    let mut total = 0.0;
    for &l in stages {
        total += style_loss_layer(&xa, &xb, phi, l)?;
    }
    Ok(total)
}

/// Hinged style distance of a same-content pair: `max(0, m_s - d_style)`.
pub fn style_diversity(
    z_a: &LatentCode,
    z_b: &LatentCode,
    g: &Generator,
    phi: &LossNetwork,
    stages: &[usize],
    m_s: f64,
) -> Result<f64> {
    expect_shared_content(z_a, z_b)?;
    let (xa, xb) = (g.render(z_a)?, g.render(z_b)?);
    let mut d = 0.0;
    for &l in stages {
        d += style_loss_layer(&xa, &xb, phi, l)?;
    }
    Ok((m_s - d).max(0.0))
}

/// Hinged content distance of a same-style pair: `max(0, m_c - d_content)`.
pub fn content_diversity(
    z_a: &LatentCode,
    z_b: &LatentCode,
    g: &Generator,
    phi: &LossNetwork,
    m_c: f64,
) -> Result<f64> {
    expect_shared_style(z_a, z_b)?;
    let d = content_loss(&g.render(z_a)?, &g.render(z_b)?, phi, CONTENT_STAGE)?;
    Ok((m_c - d).max(0.0))
}

/// Least-squares GAN losses from raw score slices:
/// `(0.5*mean((real-1)^2) + 0.5*mean(fake^2), 0.5*mean((fake-1)^2))`.
pub fn lsgan_losses(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, f64)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::shape("scores must be nonempty"));
    }
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64;
    let d_loss = 0.5 * mean(d_real, &|x| (x - 1.0) * (x - 1.0)) + 0.5 * mean(d_fake, &|x| x * x);
    let g_loss = 0.5 * mean(d_fake, &|x| (x - 1.0) * (x - 1.0));
    Ok((d_loss, g_loss))
}

/// Full generator objective of one quad, with batch-statistics
/// normalization in the generator's second decoder (the training path).
pub fn total_generator_loss(
    quad: &QuadBatch,
    g: &Generator,
    d: &Discriminator,
    phi: &LossNetwork,
    w: &LossWeights,
) -> Result<GeneratorLossTerms> {
    let mut tape = Tape::inference();
    let images = g.forward_batch(&mut tape, &quad.codes())?;
    let (_, terms) = quad_objective(&mut tape, images, 1, d, phi, w, &LossStages::default())?;
    Ok(terms)
}

/// Squared reconstruction distance of one code through generator and
/// encoders, split as `(content part, style part)`.
pub fn code_cycle_consistency(
    z: &LatentCode,
    g: &Generator,
    content_encoder: &Encoder,
    style_encoder: &Encoder,
) -> Result<(f64, f64)> {
    let image = g.render(z)?;
    let rec_c = content_encoder.encode_tensor(&image)?;
    let rec_s = style_encoder.encode_tensor(&image)?;
    let sq = |orig: &Tensor, rec: &Tensor| -> Result<f64> {
        if orig.numel() != rec.numel() {
            return Err(Error::shape("encoder output does not match code length"));
        }
        Ok(orig
            .data()
            .iter()
            .zip(rec.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    };
    Ok((sq(&z.content, &rec_c)?, sq(&z.style, &rec_s)?))
}
