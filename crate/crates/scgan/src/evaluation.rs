//! Sample-quality and disentanglement metrics.
//!
//! All metrics embed images with the fixed random feature network and are
//! deterministic given a seed: every latent draw comes from the evaluation
//! RNG stream, keyed by a per-metric index.

use crate::data::Dataset;
use crate::losses::{gram_matrix, to_unit_range};
use crate::networks::{Generator, LatentCode, LossNetwork};
use crate::rng::{stream, Purpose};
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

/// Feature stage whose pooled activations embed images for the
/// distributional distance; its maps are `S/16 x S/16`, so the image size
/// must be divisible by 16.
pub const EMBED_STAGE: usize = 4;

/// Images per network pass during evaluation.
const EVAL_BATCH: usize = 32;

/// Guard inside feature normalizations.
const NORM_EPS: f64 = 1e-10;

/// Indices of the evaluation RNG streams, one per metric.
mod eval_index {
    pub const DISTRIBUTION: u64 = 0;
    pub const DIVERSITY_STYLE: u64 = 1;
    pub const DIVERSITY_CONTENT: u64 = 2;
    pub const DIVERSITY_BOTH: u64 = 3;
    pub const PROBE: u64 = 4;
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

// ---------------------------------------------------------------------------
// Feature embeddings and Gaussian statistics
// ---------------------------------------------------------------------------

/// Pooled feature embedding of every image in an `[N,3,S,S]` batch (values
/// in `[-1,1]`): the chosen stage's activations, spatially averaged. One row
/// per image.
pub fn feature_embeddings(
    phi: &LossNetwork,
    images: &Tensor,
    stage: usize,
) -> Result<Vec<Vec<f64>>> {
    let shape = images.shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::shape(format!(
            "embedding wants [N,3,S,S] images, got {shape:?}"
        )));
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let per = 3 * h * w;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = EVAL_BATCH.min(n - start);
        let chunk = Tensor::new(
            vec![len, 3, h, w],
            images.data()[start * per..(start + len) * per].to_vec(),
        )?;
        let mut tape = Tape::inference();
        let x = tape.constant(&chunk);
        let x = to_unit_range(&mut tape, x)?;
        let feats = phi.features(&mut tape, x, &[stage])?;
        let pooled = tape.spatial_mean(feats[0])?;
        let c = tape.shape(pooled)[1];
        let data = tape.value(pooled);
        for i in 0..len {
            out.push(data[i * c..(i + 1) * c].to_vec());
        }
        start += len;
    }
    Ok(out)
}

/// Sample mean and unbiased covariance of a set of embeddings.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim` covariance, divisor `n - 1`.
    pub cov: Vec<f64>,
    pub dim: usize,
    pub count: usize,
}

impl GaussianStats {
    pub fn fit(samples: &[Vec<f64>]) -> Result<GaussianStats> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::config(
                "need at least two samples to estimate a covariance",
            ));
        }
        let dim = samples[0].len();
        if dim == 0 || samples.iter().any(|s| s.len() != dim) {
            return Err(Error::shape("embedding rows must share one positive length"));
        }
        let mut mean = vec![0.0; dim];
        for s in samples {
            for (m, &x) in mean.iter_mut().zip(s) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = vec![0.0; dim * dim];
        for s in samples {
            for i in 0..dim {
                let di = s[i] - mean[i];
                for j in i..dim {
                    cov[i * dim + j] += di * (s[j] - mean[j]);
                }
            }
        }
        let norm = (n - 1) as f64;
        for i in 0..dim {
            for j in i..dim {
                cov[i * dim + j] /= norm;
                cov[j * dim + i] = cov[i * dim + j];
            }
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding statistics".into()));
        }
        Ok(GaussianStats {
            mean,
            cov,
            dim,
            count: n,
        })
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.cov[i * self.dim + i]).sum()
    }
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition (cyclic Jacobi) and the Frechet distance
// ---------------------------------------------------------------------------

/// Eigendecomposition of a symmetric row-major `d x d` matrix by cyclic
/// Jacobi rotations: returns `(w, v)` with `a = v * diag(w) * v^T`, where
/// `v` is row-major with eigenvectors in its columns.
fn symmetric_eigen(a: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != d * d || d == 0 {
        return Err(Error::shape("eigendecomposition wants a square matrix"));
    }
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * (frob + 1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    off += m[i * d + j] * m[i * d + j];
                }
            }
        }
        if off.sqrt() <= tol {
            let w = (0..d).map(|i| m[i * d + i]).collect();
            return Ok((w, v));
        }
        for p in 0..d - 1 {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * d + q] - m[p * d + p]) / (2.0 * apq);
                if theta.is_infinite() {
                    // The pivot is denormal relative to the diagonal gap.
                    m[p * d + q] = 0.0;
                    m[q * d + p] = 0.0;
                    continue;
                }
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // m <- J^T m J and v <- v J for the Givens rotation J in
                // the (p, q) plane.
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(Error::Train(
        "eigendecomposition did not converge in 100 sweeps".into(),
    ))
}

fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Symmetric PSD square root via eigendecomposition; eigenvalues pushed
/// below zero by roundoff are clamped.
fn psd_sqrt(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let (w, v) = symmetric_eigen(a, d)?;
    let mut scaled = vec![0.0; d * d]; // v * diag(sqrt(max(w, 0)))
    for j in 0..d {
        let r = w[j].max(0.0).sqrt();
        for i in 0..d {
            scaled[i * d + j] = v[i * d + j] * r;
        }
    }
    let mut vt = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            vt[i * d + j] = v[j * d + i];
        }
    }
    Ok(matmul(&scaled, &vt, d))
}

/// Frechet distance between two Gaussians:
/// `|m_a - m_b|^2 + tr(C_a + C_b - 2 (C_a C_b)^{1/2})`.
///
/// The cross term uses `tr((C_a C_b)^{1/2}) = tr((S C_a S)^{1/2})` with
/// `S = C_b^{1/2}`, which keeps every eigendecomposition symmetric. Roundoff
/// can leave a tiny negative total; the result is clamped at zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::shape(format!(
            "statistics dimensions differ: {} vs {}",
            a.dim, b.dim
        )));
    }
    let d = a.dim;
    let mean_sq: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let s = psd_sqrt(&b.cov, d)?;
    let mut m = matmul(&s, &matmul(&a.cov, &s, d), d);
    for i in 0..d {
        for j in i + 1..d {
            let avg = 0.5 * (m[i * d + j] + m[j * d + i]);
            m[i * d + j] = avg;
            m[j * d + i] = avg;
        }
    }
    let (w, _) = symmetric_eigen(&m, d)?;
    let tr_sqrt: f64 = w.iter().map(|&x| x.max(0.0).sqrt()).sum();
    let fid = mean_sq + a.trace() + b.trace() - 2.0 * tr_sqrt;
    if !fid.is_finite() {
        return Err(Error::NonFinite("frechet distance".into()));
    }
    Ok(fid.max(0.0))
}

/// Embedding statistics over `n` freshly generated images (running-statistics
/// normalization), drawn from the evaluation stream.
pub fn generator_stats(
    g: &Generator,
    phi: &LossNetwork,
    n: usize,
    stage: usize,
    seed: u64,
) -> Result<GaussianStats> {
    let mut rng = stream(seed, Purpose::EvalCodes, eval_index::DISTRIBUTION);
    let cfg = &g.config;
    let mut embeddings = Vec::with_capacity(n);
    let mut remaining = n;
    while remaining > 0 {
        let len = EVAL_BATCH.min(remaining);
        let codes: Vec<LatentCode> = (0..len)
            .map(|_| LatentCode::sample(cfg.content_dim, cfg.style_dim, &mut rng))
            .collect::<Result<_>>()?;
        let images = g.render_batch(&codes)?;
        embeddings.extend(feature_embeddings(phi, &images, stage)?);
        remaining -= len;
    }
    GaussianStats::fit(&embeddings)
}

/// Embedding statistics over the first `n` dataset images.
pub fn dataset_stats(
    dataset: &Dataset,
    phi: &LossNetwork,
    n: usize,
    stage: usize,
) -> Result<GaussianStats> {
    if n > dataset.len() {
        return Err(Error::config(format!(
            "asked for {n} reference images, dataset holds {}",
            dataset.len()
        )));
    }
    let mut embeddings = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = EVAL_BATCH.min(n - start);
        let indices: Vec<usize> = (start..start + len).collect();
        let images = dataset.batch(&indices)?;
        embeddings.extend(feature_embeddings(phi, &images, stage)?);
        start += len;
    }
    GaussianStats::fit(&embeddings)
}

// ---------------------------------------------------------------------------
// Perceptual diversity
// ---------------------------------------------------------------------------

/// Which latent halves vary between the two images of a diversity pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiversityMode {
    /// Shared content code, fresh style codes.
    StyleOnly,
    /// Fresh content codes, shared style code.
    ContentOnly,
    /// Both halves fresh.
    Both,
}

impl DiversityMode {
    fn stream_index(self) -> u64 {
        match self {
            DiversityMode::StyleOnly => eval_index::DIVERSITY_STYLE,
            DiversityMode::ContentOnly => eval_index::DIVERSITY_CONTENT,
            DiversityMode::Both => eval_index::DIVERSITY_BOTH,
        }
    }
}

/// Perceptual distance between two images of one shape: per stage, the
/// feature vector at every spatial site is normalized to unit length, the
/// squared difference is summed over channels and averaged over space, and
/// the per-stage values are averaged.
pub fn feature_distance(
    phi: &LossNetwork,
    a: &Tensor,
    b: &Tensor,
    stages: &[usize],
) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "feature distance wants matching shapes, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let shape = a.shape().to_vec();
    if shape.len() != 4 || shape[0] != 1 || shape[1] != 3 {
        return Err(Error::shape(format!(
            "feature distance wants [1,3,S,S] images, got {shape:?}"
        )));
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    let both = Tensor::new(vec![2, 3, shape[2], shape[3]], data)?;

    let mut tape = Tape::inference();
    let x = tape.constant(&both);
    let x = to_unit_range(&mut tape, x)?;
    let feats = phi.features(&mut tape, x, stages)?;

    let mut total = 0.0;
    for &f in &feats {
        let fs = tape.shape(f).to_vec(); // [2, C, H, W]
        let (c, h, w) = (fs[1], fs[2], fs[3]);
        let data = tape.value(f);
        let plane = h * w;
        let image = c * plane;
        let mut stage_sum = 0.0;
        for site in 0..plane {
            let mut n0 = NORM_EPS;
            let mut n1 = NORM_EPS;
            for ch in 0..c {
                let v0 = data[ch * plane + site];
                let v1 = data[image + ch * plane + site];
                n0 += v0 * v0;
                n1 += v1 * v1;
            }
            let (n0, n1) = (n0.sqrt(), n1.sqrt());
            for ch in 0..c {
                let u0 = data[ch * plane + site] / n0;
                let u1 = data[image + ch * plane + site] / n1;
                stage_sum += (u0 - u1) * (u0 - u1);
            }
        }
        total += stage_sum / plane as f64;
    }
    Ok(total / stages.len() as f64)
}

/// Mean [`feature_distance`] over `n_pairs` pairs produced by an arbitrary
/// renderer (codes in, `[N,3,S,S]` images out). Pair draw order per pair:
/// content code(s), then style code(s).
#[allow(clippy::too_many_arguments)] // mirrors the probe entry point
pub fn diversity_with(
    render: &dyn Fn(&[LatentCode]) -> Result<Tensor>,
    phi: &LossNetwork,
    content_dim: usize,
    style_dim: usize,
    n_pairs: usize,
    mode: DiversityMode,
    stages: &[usize],
    seed: u64,
) -> Result<f64> {
    if n_pairs == 0 {
        return Err(Error::config("diversity needs at least one pair"));
    }
    let mut rng = stream(seed, Purpose::EvalCodes, mode.stream_index());
    let mut total = 0.0;
    for _ in 0..n_pairs {
        let (c1, c2) = match mode {
            DiversityMode::StyleOnly => {
                let c = Tensor::randn(&[content_dim], 1.0, &mut rng)?;
                (c.clone(), c)
            }
            _ => (
                Tensor::randn(&[content_dim], 1.0, &mut rng)?,
                Tensor::randn(&[content_dim], 1.0, &mut rng)?,
            ),
        };
        let (s1, s2) = match mode {
            DiversityMode::ContentOnly => {
                let s = Tensor::randn(&[style_dim], 1.0, &mut rng)?;
                (s.clone(), s)
            }
            _ => (
                Tensor::randn(&[style_dim], 1.0, &mut rng)?,
                Tensor::randn(&[style_dim], 1.0, &mut rng)?,
            ),
        };
        let codes = [LatentCode::new(c1, s1)?, LatentCode::new(c2, s2)?];
        let images = render(&codes)?;
        let (a, b) = split_pair(&images)?;
        total += feature_distance(phi, &a, &b, stages)?;
    }
    Ok(total / n_pairs as f64)
}

/// [`diversity_with`] over the generator's inference path.
pub fn perceptual_diversity(
    g: &Generator,
    phi: &LossNetwork,
    n_pairs: usize,
    mode: DiversityMode,
    stages: &[usize],
    seed: u64,
) -> Result<f64> {
    let render = |codes: &[LatentCode]| g.render_batch(codes);
    diversity_with(
        &render,
        phi,
        g.config.content_dim,
        g.config.style_dim,
        n_pairs,
        mode,
        stages,
        seed,
    )
}

fn split_pair(images: &Tensor) -> Result<(Tensor, Tensor)> {
    let shape = images.shape().to_vec();
    if shape.len() != 4 || shape[0] != 2 {
        return Err(Error::shape(format!(
            "expected a [2,3,S,S] pair, got {shape:?}"
        )));
    }
    let per = shape[1] * shape[2] * shape[3];
    let single = vec![1, shape[1], shape[2], shape[3]];
    Ok((
        Tensor::new(single.clone(), images.data()[..per].to_vec())?,
        Tensor::new(single, images.data()[per..].to_vec())?,
    ))
}

// ---------------------------------------------------------------------------
// Disentanglement probe
// ---------------------------------------------------------------------------

/// Binary edge mask of one `[1,3,S,S]` or `[3,S,S]` image: Sobel gradient
/// magnitude of the channel-mean luminance (replicate padding), thresholded
/// strictly above its own 75th percentile (nearest rank). The strict
/// comparison keeps piecewise-constant images meaningful: pixels tied with
/// the threshold — e.g. the flat interior when most gradients are zero — stay
/// out of the mask.
pub fn edge_mask(image: &Tensor) -> Result<Vec<bool>> {
    let shape = image.shape().to_vec();
    let (h, w) = match shape.as_slice() {
        [3, h, w] => (*h, *w),
        [1, 3, h, w] => (*h, *w),
        _ => {
            return Err(Error::shape(format!(
                "edge mask wants [3,S,S] or [1,3,S,S], got {shape:?}"
            )))
        }
    };
    if h < 2 || w < 2 {
        return Err(Error::shape("edge mask needs at least 2x2 images"));
    }
    let data = image.data();
    let plane = h * w;
    let lum: Vec<f64> = (0..plane)
        .map(|i| (data[i] + data[plane + i] + data[2 * plane + i]) / 3.0)
        .collect();
    let at = |y: i64, x: i64| -> f64 {
        let y = y.clamp(0, h as i64 - 1) as usize;
        let x = x.clamp(0, w as i64 - 1) as usize;
        lum[y * w + x]
    };
    let mut magnitude = vec![0.0; plane];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1);
            let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1);
            magnitude[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    // Images are unit-range by contract, so gradients under 1e-9 are noise:
    // a flat image has no edges.
    let max_g = magnitude.iter().cloned().fold(0.0, f64::max);
    if max_g < 1e-9 {
        return Ok(vec![false; plane]);
    }
    // Snap cancellation residue to zero so regions that are constant up to
    // rounding stay out of the percentile.
    for g in &mut magnitude {
        if *g < max_g * 1e-9 {
            *g = 0.0;
        }
    }
    let mut sorted = magnitude.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = (0.75 * plane as f64).ceil() as usize; // 1-based nearest rank
    let threshold = sorted[rank.clamp(1, plane) - 1];
    // The margin treats magnitudes within rounding error of the threshold as
    // ties and keeps them out of the mask. Both terms scale linearly with the
    // image contrast, so rescaling the luminance leaves the mask unchanged:
    // the mask is a function of edge geometry alone.
    let cut = threshold * (1.0 + 1e-9) + max_g * 1e-12;
    Ok(magnitude.iter().map(|&g| g > cut).collect())
}

/// Intersection over union of two masks. Two empty masks count as identical
/// (IoU 1).
pub fn edge_iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("edge masks must share a length"));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Mean squared Frobenius distance between the two images' channel
/// co-activation matrices, averaged over the given feature stages.
pub fn style_gram_distance(
    phi: &LossNetwork,
    a: &Tensor,
    b: &Tensor,
    stages: &[usize],
) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("style distance wants matching image shapes"));
    }
    let mut total = 0.0;
    for &stage in stages {
        let ga = image_gram(phi, a, stage)?;
        let gb = image_gram(phi, b, stage)?;
        total += ga
            .iter()
            .zip(&gb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
    }
    Ok(total / stages.len() as f64)
}

fn image_gram(phi: &LossNetwork, image: &Tensor, stage: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::inference();
    let x = tape.constant(image);
    let x = to_unit_range(&mut tape, x)?;
    let feats = phi.features(&mut tape, x, &[stage])?;
    let map = tape.to_tensor(feats[0])?;
    Ok(gram_matrix(&map, stage)?.values.data().to_vec())
}

/// Raw per-pair probe results. Swapped pairs share one latent half; the
/// matching baseline pairs draw both halves independently.
#[derive(Debug, Clone)]
pub struct ProbeReport {
    /// Edge-mask IoU of pairs sharing the content code (style swapped).
    pub style_swap_iou: Vec<f64>,
    /// Edge-mask IoU of fully independent pairs.
    pub independent_iou: Vec<f64>,
    /// Gram distance of pairs sharing the style code (content swapped).
    pub content_swap_style_dist: Vec<f64>,
    /// Gram distance of fully independent pairs.
    pub independent_style_dist: Vec<f64>,
}

/// Aggregate view of a [`ProbeReport`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeSummary {
    pub style_swap_iou: f64,
    pub independent_iou: f64,
    /// How much more content survives a style swap than chance: mean IoU
    /// difference, positive when content is preserved.
    pub content_iou_gap: f64,
    pub content_swap_style_dist: f64,
    pub independent_style_dist: f64,
    /// How much closer in style content-swapped pairs are than chance:
    /// baseline minus swapped distance, positive when style is preserved.
    pub style_dist_gap: f64,
}

impl ProbeReport {
    pub fn summary(&self) -> ProbeSummary {
        let ss = mean(&self.style_swap_iou);
        let ii = mean(&self.independent_iou);
        let cs = mean(&self.content_swap_style_dist);
        let is = mean(&self.independent_style_dist);
        ProbeSummary {
            style_swap_iou: ss,
            independent_iou: ii,
            content_iou_gap: ss - ii,
            content_swap_style_dist: cs,
            independent_style_dist: is,
            style_dist_gap: is - cs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, values, bounded) in [
            ("style_swap_iou", &self.style_swap_iou, true),
            ("independent_iou", &self.independent_iou, true),
            ("content_swap_style_dist", &self.content_swap_style_dist, false),
            ("independent_style_dist", &self.independent_style_dist, false),
        ] {
            if values.is_empty() {
                return Err(Error::Train(format!("probe field {name} is empty")));
            }
            for &v in values {
                if !v.is_finite() || (bounded && !(0.0..=1.0).contains(&v)) || v < 0.0 {
                    return Err(Error::Train(format!(
                        "probe field {name} holds invalid value {v}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Probe an arbitrary renderer for style/content disentanglement over
/// `n_pairs` draws of each pair type. Per pair, the stream is consumed in a
/// fixed order: style-swap codes, independent-IoU codes, content-swap codes,
/// independent-style codes.
#[allow(clippy::too_many_arguments)]
pub fn probe_with(
    render: &dyn Fn(&[LatentCode]) -> Result<Tensor>,
    phi: &LossNetwork,
    content_dim: usize,
    style_dim: usize,
    n_pairs: usize,
    stages: &[usize],
    seed: u64,
) -> Result<ProbeReport> {
    if n_pairs == 0 {
        return Err(Error::config("probe needs at least one pair"));
    }
    let mut rng = stream(seed, Purpose::EvalCodes, eval_index::PROBE);
    let mut report = ProbeReport {
        style_swap_iou: Vec::with_capacity(n_pairs),
        independent_iou: Vec::with_capacity(n_pairs),
        content_swap_style_dist: Vec::with_capacity(n_pairs),
        independent_style_dist: Vec::with_capacity(n_pairs),
    };
    for _ in 0..n_pairs {
        // Style swap: shared content, fresh styles.
        let c = Tensor::randn(&[content_dim], 1.0, &mut rng)?;
        let s1 = Tensor::randn(&[style_dim], 1.0, &mut rng)?;
        let s2 = Tensor::randn(&[style_dim], 1.0, &mut rng)?;
        let pair = render(&[
            LatentCode::new(c.clone(), s1)?,
            LatentCode::new(c, s2)?,
        ])?;
        let (a, b) = split_pair(&pair)?;
        report
            .style_swap_iou
            .push(edge_iou(&edge_mask(&a)?, &edge_mask(&b)?)?);

        // Independent baseline for the IoU.
        let pair = render(&[
            LatentCode::sample(content_dim, style_dim, &mut rng)?,
            LatentCode::sample(content_dim, style_dim, &mut rng)?,
        ])?;
        let (a, b) = split_pair(&pair)?;
        report
            .independent_iou
            .push(edge_iou(&edge_mask(&a)?, &edge_mask(&b)?)?);

        // Content swap: shared style, fresh contents.
        let c1 = Tensor::randn(&[content_dim], 1.0, &mut rng)?;
        let c2 = Tensor::randn(&[content_dim], 1.0, &mut rng)?;
        let s = Tensor::randn(&[style_dim], 1.0, &mut rng)?;
        let pair = render(&[
            LatentCode::new(c1, s.clone())?,
            LatentCode::new(c2, s)?,
        ])?;
        let (a, b) = split_pair(&pair)?;
        report
            .content_swap_style_dist
            .push(style_gram_distance(phi, &a, &b, stages)?);

        // Independent baseline for the style distance.
        let pair = render(&[
            LatentCode::sample(content_dim, style_dim, &mut rng)?,
            LatentCode::sample(content_dim, style_dim, &mut rng)?,
        ])?;
        let (a, b) = split_pair(&pair)?;
        report
            .independent_style_dist
            .push(style_gram_distance(phi, &a, &b, stages)?);
    }
    report.validate()?;
    Ok(report)
}

/// [`probe_with`] over the generator's inference path.
pub fn disentanglement_probe(
    g: &Generator,
    phi: &LossNetwork,
    n_pairs: usize,
    stages: &[usize],
    seed: u64,
) -> Result<ProbeReport> {
    let render = |codes: &[LatentCode]| g.render_batch(codes);
    probe_with(
        &render,
        phi,
        g.config.content_dim,
        g.config.style_dim,
        n_pairs,
        stages,
        seed,
    )
}

// ---------------------------------------------------------------------------
// One-call evaluation
// ---------------------------------------------------------------------------

/// Sample counts and feature stages for a full evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Images per side of the distributional distance.
    pub fid_samples: usize,
    /// Pairs per diversity mode.
    pub diversity_pairs: usize,
    /// Pairs per probe category.
    pub probe_pairs: usize,
    /// Stage whose pooled features embed images for the distance.
    pub embed_stage: usize,
    /// Stages for the diversity and style-distance metrics.
    pub feature_stages: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            fid_samples: 1000,
            diversity_pairs: 500,
            probe_pairs: 200,
            embed_stage: EMBED_STAGE,
            feature_stages: vec![1, 2, 3, 4],
            seed: 1,
        }
    }
}

/// Everything the `eval` command reports.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub fid: f64,
    pub diversity_style: f64,
    pub diversity_content: f64,
    pub diversity_both: f64,
    pub probe: ProbeSummary,
    /// Images actually used per side of the distance.
    pub fid_samples: usize,
}

/// Run every metric against one generator and a reference dataset. The
/// distance uses `min(fid_samples, dataset.len())` images per side.
pub fn evaluate(
    g: &Generator,
    dataset: &Dataset,
    phi: &LossNetwork,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let n = config.fid_samples.min(dataset.len());
    let real = dataset_stats(dataset, phi, n, config.embed_stage)?;
    let fake = generator_stats(g, phi, n, config.embed_stage, config.seed)?;
    let fid = frechet_distance(&real, &fake)?;
    let stages = &config.feature_stages;
    let diversity_style = perceptual_diversity(
        g,
        phi,
        config.diversity_pairs,
        DiversityMode::StyleOnly,
        stages,
        config.seed,
    )?;
    let diversity_content = perceptual_diversity(
        g,
        phi,
        config.diversity_pairs,
        DiversityMode::ContentOnly,
        stages,
        config.seed,
    )?;
    let diversity_both = perceptual_diversity(
        g,
        phi,
        config.diversity_pairs,
        DiversityMode::Both,
        stages,
        config.seed,
    )?;
    let probe = disentanglement_probe(g, phi, config.probe_pairs, stages, config.seed)?;
    Ok(EvalReport {
        fid,
        diversity_style,
        diversity_content,
        diversity_both,
        probe: probe.summary(),
        fid_samples: n,
    })
}
