//! Parameterized layers on top of the tape.
//!
//! Normalization here is the load-bearing part of the design: instance
//! normalization strips per-sample feature statistics, and adaptive
//! instance normalization re-imposes externally supplied ones, which is
//! the mechanism that routes style through the generator. AdaIN is by
//! construction `scale * IN(x) + shift` with learnable-free statistics.

use rand::Rng;

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Epsilon added to variances before the square root.
pub const NORM_EPSILON: f64 = 1e-5;

/// Fraction of the batch statistic blended into running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Convolution parameters plus geometry. Weights use scaled Gaussian init
/// with gain sqrt(2), biases start at zero.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = Tensor::randn(&[out_ch, in_ch, k, k], he_std(in_ch * k * k), rng)?
            .with_requires_grad();
        let bias = Tensor::zeros(&[out_ch])?.with_requires_grad();
        Ok(Conv2d { weight, bias, stride, pad })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.leaf(&self.weight);
        let b = tape.leaf(&self.bias);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn state_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }

    pub fn state(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Fully connected layer, `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(in_f: usize, out_f: usize, rng: &mut impl Rng) -> Result<Self> {
        let weight = Tensor::randn(&[out_f, in_f], he_std(in_f), rng)?.with_requires_grad();
        let bias = Tensor::zeros(&[out_f])?.with_requires_grad();
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.leaf(&self.weight);
        let b = tape.leaf(&self.bias);
        tape.linear(x, w, b)
    }

    pub fn state_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }

    pub fn state(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// `(x - mean) / sqrt(var + eps)` per sample and channel over the spatial
/// plane, biased variance. Shared by instance norm and AdaIN so that the
/// two agree exactly on the statistics they remove.
pub fn normalize_instance(tape: &mut Tape, x: Var, epsilon: f64) -> Result<Var> {
    let (mean, var) = tape.spatial_moments(x)?;
    let centered = tape.sub_nc(x, mean)?;
    let shifted = tape.affine(var, 1.0, epsilon)?;
    let sigma = tape.sqrt(shifted)?;
    tape.div_nc(centered, sigma)
}

/// Instance normalization with learnable per-channel gain and bias.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub epsilon: f64,
}

impl InstanceNorm {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(InstanceNorm {
            gamma: Tensor::ones(&[channels])?.with_requires_grad(),
            beta: Tensor::zeros(&[channels])?.with_requires_grad(),
            epsilon: NORM_EPSILON,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xn = normalize_instance(tape, x, self.epsilon)?;
        let g = tape.leaf(&self.gamma);
        let b = tape.leaf(&self.beta);
        let scaled = tape.mul_c(xn, g)?;
        tape.add_c(scaled, b)
    }

    pub fn state_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("gamma", &mut self.gamma), ("beta", &mut self.beta)]
    }

    pub fn state(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("gamma", &self.gamma), ("beta", &self.beta)]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Externally supplied scale/shift for one AdaIN site, one value per channel.
#[derive(Debug, Clone)]
pub struct AdaInParams {
    pub scale: Tensor,
    pub shift: Tensor,
}

impl AdaInParams {
    pub fn new(scale: Tensor, shift: Tensor) -> Result<Self> {
        if scale.shape().len() != 1 || scale.shape() != shift.shape() {
            return Err(Error::shape(format!(
                "adain params want matching [C] vectors, got {:?} and {:?}",
                scale.shape(),
                shift.shape()
            )));
        }
        Ok(AdaInParams { scale, shift })
    }
}

/// Adaptive instance normalization: `scale * IN(x) + shift`, statistics-only
/// normalization (no learnable gain inside). Gradients flow to `x` and to
/// the supplied parameters.
pub fn adain(tape: &mut Tape, x: Var, params: &AdaInParams) -> Result<Var> {
    let xn = normalize_instance(tape, x, NORM_EPSILON)?;
    let s = tape.leaf(&params.scale);
    let b = tape.leaf(&params.shift);
    let scaled = tape.mul_c(xn, s)?;
    tape.add_c(scaled, b)
}

/// AdaIN with per-sample parameters already living on the tape as `[N,C]`
/// matrices — the path used when an MLP predicts them from style codes.
pub fn adain_nc(tape: &mut Tape, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let xn = normalize_instance(tape, x, NORM_EPSILON)?;
    let scaled = tape.mul_nc(xn, scale)?;
    tape.add_nc(scaled, shift)
}

/// Batch normalization. Training uses biased batch statistics and folds
/// them into running estimates; inference normalizes with the running
/// estimates alone.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

/// Batch statistics captured during a training-mode forward, to be folded
/// into the running estimates once the step is accepted.
pub struct BatchStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: Tensor::ones(&[channels])?.with_requires_grad(),
            beta: Tensor::zeros(&[channels])?.with_requires_grad(),
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::ones(&[channels])?,
            momentum: BN_MOMENTUM,
            epsilon: NORM_EPSILON,
        })
    }

    /// Normalize with batch statistics (needs N >= 2) without touching the
    /// running estimates. Returns the statistics for an optional commit.
    pub fn forward_batch(&self, tape: &mut Tape, x: Var) -> Result<(Var, BatchStats)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(format!("batch norm wants rank 4, got {shape:?}")));
        }
        if shape[0] < 2 {
            return Err(Error::shape(
                "batch norm in training mode needs a batch of at least 2",
            ));
        }
        let mean = tape.batch_channel_mean(x)?;
        let centered = tape.sub_c(x, mean)?;
        let sq = tape.mul(centered, centered)?;
        let var = tape.batch_channel_mean(sq)?;
        let stats = BatchStats {
            mean: tape.value(mean).to_vec(),
            var: tape.value(var).to_vec(),
        };
        let shifted = tape.affine(var, 1.0, self.epsilon)?;
        let sigma = tape.sqrt(shifted)?;
        let xn = tape.div_c(centered, sigma)?;
        let g = tape.leaf(&self.gamma);
        let b = tape.leaf(&self.beta);
        let scaled = tape.mul_c(xn, g)?;
        let y = tape.add_c(scaled, b)?;
        Ok((y, stats))
    }

    /// Blend batch statistics into the running estimates:
    /// `r <- (1 - momentum) * r + momentum * batch`.
    pub fn commit(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, s) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * s;
        }
        for (r, s) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * s;
        }
    }

    /// Training-mode forward: batch statistics plus running update.
    pub fn forward_train(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (y, stats) = self.forward_batch(tape, x)?;
        self.commit(&stats);
        Ok(y)
    }

    /// Inference-mode forward: running statistics, any batch size.
    pub fn forward_infer(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(format!("batch norm wants rank 4, got {shape:?}")));
        }
        let mean = tape.constant(&self.running_mean);
        let sigma_t = Tensor::new(
            vec![self.running_var.numel()],
            self.running_var
                .data()
                .iter()
                .map(|v| (v + self.epsilon).sqrt())
                .collect(),
        )?;
        let sigma = tape.constant(&sigma_t);
        let centered = tape.sub_c(x, mean)?;
        let xn = tape.div_c(centered, sigma)?;
        let g = tape.leaf(&self.gamma);
        let b = tape.leaf(&self.beta);
        let scaled = tape.mul_c(xn, g)?;
        tape.add_c(scaled, b)
    }

    pub fn state_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("gamma", &mut self.gamma),
            ("beta", &mut self.beta),
            ("running_mean", &mut self.running_mean),
            ("running_var", &mut self.running_var),
        ]
    }

    pub fn state(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Stylization residual block: two 3x3 convolutions, each followed by an
/// AdaIN site, ReLU between them, identity skip, no activation after the
/// add. Channel count is preserved.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

/// Number of AdaIN sites per residual block.
pub const ADAIN_SITES_PER_BLOCK: usize = 2;

impl ResidualBlock {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(ResidualBlock {
            conv1: Conv2d::new(channels, channels, 3, 1, 1, rng)?,
            conv2: Conv2d::new(channels, channels, 3, 1, 1, rng)?,
        })
    }

    /// Spec-level forward with one `[C]` parameter pair per site.
    pub fn forward(&self, tape: &mut Tape, x: Var, params: &[AdaInParams; 2]) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let h = adain(tape, h, &params[0])?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, h)?;
        let h = adain(tape, h, &params[1])?;
        tape.add(x, h)
    }

    /// Forward with per-sample `[N,C]` parameters on the tape.
    pub fn forward_nc(
        &self,
        tape: &mut Tape,
        x: Var,
        site1: (Var, Var),
        site2: (Var, Var),
    ) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let h = adain_nc(tape, h, site1.0, site1.1)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, h)?;
        let h = adain_nc(tape, h, site2.0, site2.1)?;
        tape.add(x, h)
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (name, t) in self.conv1.state_mut() {
            out.push((format!("conv1.{name}"), t));
        }
        for (name, t) in self.conv2.state_mut() {
            out.push((format!("conv2.{name}"), t));
        }
        out
    }

    pub fn state(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, t) in self.conv1.state() {
            out.push((format!("conv1.{name}"), t));
        }
        for (name, t) in self.conv2.state() {
            out.push((format!("conv2.{name}"), t));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.conv1.params_mut();
        out.extend(self.conv2.params_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use crate::tensor::check::{check_gradients, GradCheck};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn instance_norm_standardizes_a_known_channel() {
        // Channel values 1..4: mean 2.5, biased variance 1.25.
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let norm = InstanceNorm::new(1).unwrap();
        let mut tape = Tape::inference();
        let xv = tape.leaf(&x);
        let y = norm.forward(&mut tape, xv).unwrap();
        let want = [-1.34163, -0.44721, 0.44721, 1.34163];
        for (got, expect) in tape.value(y).iter().zip(&want) {
            assert!((got - expect).abs() < 1e-4, "{got} vs {expect}");
        }
        let (m, v) = {
            let yv = tape.spatial_moments(y).unwrap();
            (tape.value(yv.0)[0], tape.value(yv.1)[0])
        };
        assert!(m.abs() < 1e-4);
        assert!((v - 1.0).abs() < 1e-4);
    }

    #[test]
    fn instance_norm_output_moments_are_standard() {
        let mut rng = stream(2, Purpose::Init, 60);
        let x = Tensor::randn(&[3, 4, 8, 8], 2.5, &mut rng).unwrap();
        let norm = InstanceNorm::new(4).unwrap();
        let mut tape = Tape::inference();
        let xv = tape.leaf(&x);
        let y = norm.forward(&mut tape, xv).unwrap();
        let (m, v) = tape.spatial_moments(y).unwrap();
        for &mi in tape.value(m) {
            assert!(mi.abs() < 1e-4, "mean {mi}");
        }
        for &vi in tape.value(v) {
            assert!((vi - 1.0).abs() < 1e-4, "var {vi}");
        }
    }

    #[test]
    fn instance_norm_is_shift_and_scale_invariant() {
        // IN(a*x + b) ~= IN(x) for a > 0. Exact only at epsilon = 0: the
        // scaled input sees epsilon/a^2 inside the sqrt, so allow O(eps).
        let mut rng = stream(3, Purpose::Init, 61);
        let x = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut rng).unwrap();
        let moved = Tensor::new(
            vec![2, 3, 6, 6],
            x.data().iter().map(|v| 3.7 * v - 2.2).collect(),
        )
        .unwrap();
        let norm = InstanceNorm::new(3).unwrap();
        let run = |input: &Tensor| {
            let mut tape = Tape::inference();
            let xv = tape.leaf(input);
            let y = norm.forward(&mut tape, xv).unwrap();
            tape.value(y).to_vec()
        };
        for (a, b) in run(&x).iter().zip(run(&moved)) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn adain_equals_scale_times_in_plus_shift() {
        let mut rng = stream(4, Purpose::Init, 62);
        let x = Tensor::randn(&[2, 3, 4, 4], 1.7, &mut rng).unwrap();
        let scale = Tensor::randn(&[3], 1.0, &mut rng).unwrap();
        let shift = Tensor::randn(&[3], 1.0, &mut rng).unwrap();
        let params = AdaInParams::new(scale.clone(), shift.clone()).unwrap();

        let mut tape = Tape::inference();
        let xv = tape.leaf(&x);
        let a = adain(&mut tape, xv, &params).unwrap();

        let xn = normalize_instance(&mut tape, xv, NORM_EPSILON).unwrap();
        let sv = tape.leaf(&scale);
        let bv = tape.leaf(&shift);
        let scaled = tape.mul_c(xn, sv).unwrap();
        let manual = tape.add_c(scaled, bv).unwrap();

        for (u, v) in tape.value(a).iter().zip(tape.value(manual)) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn adain_imposes_requested_moments() {
        let mut rng = stream(5, Purpose::Init, 63);
        let x = Tensor::randn(&[1, 2, 8, 8], 3.0, &mut rng).unwrap();
        let params = AdaInParams::new(
            t(&[2], &[2.0, 0.5]),
            t(&[2], &[-1.0, 4.0]),
        )
        .unwrap();
        let mut tape = Tape::inference();
        let xv = tape.leaf(&x);
        let y = adain(&mut tape, xv, &params).unwrap();
        let (m, v) = tape.spatial_moments(y).unwrap();
        let means = tape.value(m);
        let vars = tape.value(v);
        assert!((means[0] + 1.0).abs() < 1e-6);
        assert!((means[1] - 4.0).abs() < 1e-6);
        assert!((vars[0] - 4.0).abs() < 1e-3);
        assert!((vars[1] - 0.25).abs() < 1e-4);
    }

    #[test]
    fn batch_norm_standardizes_batch_and_updates_running() {
        let mut rng = stream(6, Purpose::Init, 64);
        let x = Tensor::randn(&[4, 2, 3, 3], 2.0, &mut rng).unwrap();
        let mut bn = BatchNorm::new(2).unwrap();
        let mut tape = Tape::inference();
        let xv = tape.leaf(&x);
        let y = bn.forward_train(&mut tape, xv).unwrap();
        // Output batch moments are (0, ~1).
        let m = tape.batch_channel_mean(y).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let v = tape.batch_channel_mean(sq).unwrap();
        for &mi in tape.value(m) {
            assert!(mi.abs() < 1e-10);
        }
        for &vi in tape.value(v) {
            assert!((vi - 1.0).abs() < 1e-4);
        }
        // Running statistics moved one momentum step from (0, 1).
        let mut tape2 = Tape::inference();
        let xv2 = tape2.leaf(&x);
        let bm = tape2.batch_channel_mean(xv2).unwrap();
        let batch_mean = tape2.value(bm).to_vec();
        for (r, b) in bn.running_mean.data().iter().zip(&batch_mean) {
            assert!((r - 0.1 * b).abs() < 1e-12);
        }
        for r in bn.running_var.data() {
            assert!((r - 0.9).abs() < 0.5, "running var near 0.9 + 0.1*batch");
        }
    }

    #[test]
    fn batch_norm_rejects_singleton_batch_in_training() {
        let x = Tensor::zeros(&[1, 2, 4, 4]).unwrap();
        let bn = BatchNorm::new(2).unwrap();
        let mut tape = Tape::inference();
        let xv = tape.leaf(&x);
        assert!(bn.forward_batch(&mut tape, xv).is_err());
    }

    #[test]
    fn batch_norm_inference_uses_running_stats() {
        let mut bn = BatchNorm::new(1).unwrap();
        bn.running_mean.data_mut()[0] = 2.0;
        bn.running_var.data_mut()[0] = 4.0;
        let x = t(&[1, 1, 2, 2], &[2.0, 4.0, 0.0, 6.0]);
        let mut tape = Tape::inference();
        let xv = tape.leaf(&x);
        let y = bn.forward_infer(&mut tape, xv).unwrap();
        let eps = NORM_EPSILON;
        for (got, raw) in tape.value(y).iter().zip(x.data()) {
            let expect = (raw - 2.0) / (4.0 + eps).sqrt();
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_block_with_zero_convs_is_identity() {
        let mut rng = stream(7, Purpose::Init, 65);
        let mut block = ResidualBlock::new(3, &mut rng).unwrap();
        for (_, tensor) in block.state_mut() {
            tensor.data_mut().fill(0.0);
        }
        let params = [
            AdaInParams::new(Tensor::ones(&[3]).unwrap(), Tensor::zeros(&[3]).unwrap()).unwrap(),
            AdaInParams::new(Tensor::ones(&[3]).unwrap(), Tensor::zeros(&[3]).unwrap()).unwrap(),
        ];
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng).unwrap();
        let mut tape = Tape::inference();
        let xv = tape.leaf(&x);
        let y = block.forward(&mut tape, xv, &params).unwrap();
        assert_eq!(tape.value(y), x.data());
    }

    #[test]
    fn residual_block_second_shift_adds_through() {
        // Zero convolutions leave only the final AdaIN shift on the branch:
        // y = x + shift2 broadcast over the plane.
        let mut rng = stream(8, Purpose::Init, 66);
        let mut block = ResidualBlock::new(2, &mut rng).unwrap();
        for (_, tensor) in block.state_mut() {
            tensor.data_mut().fill(0.0);
        }
        let params = [
            AdaInParams::new(Tensor::ones(&[2]).unwrap(), Tensor::zeros(&[2]).unwrap()).unwrap(),
            AdaInParams::new(Tensor::ones(&[2]).unwrap(), t(&[2], &[0.5, -1.5])).unwrap(),
        ];
        let x = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng).unwrap();
        let mut tape = Tape::inference();
        let xv = tape.leaf(&x);
        let y = block.forward(&mut tape, xv, &params).unwrap();
        for (i, (got, orig)) in tape.value(y).iter().zip(x.data()).enumerate() {
            let shift = if i < 16 { 0.5 } else { -1.5 };
            assert!((got - orig - shift).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_gradients_verify_by_finite_differences() {
        let mut rng = stream(9, Purpose::Init, 67);
        let x = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng).unwrap();
        let norm = InstanceNorm::new(2).unwrap();
        let mut bn = BatchNorm::new(2).unwrap();
        bn.running_mean = Tensor::randn(&[2], 0.3, &mut rng).unwrap();
        let block = ResidualBlock::new(2, &mut rng).unwrap();
        let scale = Tensor::randn(&[2], 0.6, &mut rng).unwrap();
        let shift = Tensor::randn(&[2], 0.6, &mut rng).unwrap();

        // Each case recomposes the layer from leaf vars so the check
        // perturbs inputs and parameters alike.
        let in_case: GradCheck = Box::new(|tape, vs| {
            let xn = normalize_instance(tape, vs[0], NORM_EPSILON)?;
            let scaled = tape.mul_c(xn, vs[1])?;
            let y = tape.add_c(scaled, vs[2])?;
            let sq = tape.mul(y, y)?;
            tape.sum_all(sq)
        });
        let worst = check_gradients(&[&x, &norm.gamma, &norm.beta], &in_case).unwrap();
        assert!(worst < 1e-4, "instance norm: {worst}");

        let adain_case: GradCheck = Box::new(|tape, vs| {
            let xn = normalize_instance(tape, vs[0], NORM_EPSILON)?;
            let scaled = tape.mul_c(xn, vs[1])?;
            let y = tape.add_c(scaled, vs[2])?;
            let sq = tape.mul(y, y)?;
            tape.sum_all(sq)
        });
        let worst = check_gradients(&[&x, &scale, &shift], &adain_case).unwrap();
        assert!(worst < 1e-4, "adain: {worst}");

        let bn_case: GradCheck = Box::new(|tape, vs| {
            let mean = tape.batch_channel_mean(vs[0])?;
            let centered = tape.sub_c(vs[0], mean)?;
            let sq = tape.mul(centered, centered)?;
            let var = tape.batch_channel_mean(sq)?;
            let shifted = tape.affine(var, 1.0, NORM_EPSILON)?;
            let sigma = tape.sqrt(shifted)?;
            let xn = tape.div_c(centered, sigma)?;
            let scaled = tape.mul_c(xn, vs[1])?;
            let y = tape.add_c(scaled, vs[2])?;
            let yy = tape.mul(y, y)?;
            tape.sum_all(yy)
        });
        let worst = check_gradients(&[&x, &bn.gamma, &bn.beta], &bn_case).unwrap();
        assert!(worst < 1e-4, "batch norm: {worst}");

        let block_case: GradCheck = Box::new(|tape, vs| {
            let h = tape.conv2d(vs[0], vs[1], vs[2], 1, 1)?;
            let h = {
                let xn = normalize_instance(tape, h, NORM_EPSILON)?;
                let scaled = tape.mul_c(xn, vs[5])?;
                tape.add_c(scaled, vs[6])?
            };
            let h = tape.relu(h)?;
            let h = tape.conv2d(h, vs[3], vs[4], 1, 1)?;
            let h = {
                let xn = normalize_instance(tape, h, NORM_EPSILON)?;
                let scaled = tape.mul_c(xn, vs[5])?;
                tape.add_c(scaled, vs[6])?
            };
            let y = tape.add(vs[0], h)?;
            let sq = tape.mul(y, y)?;
            tape.sum_all(sq)
        });
        let worst = check_gradients(
            &[
                &x,
                &block.conv1.weight,
                &block.conv1.bias,
                &block.conv2.weight,
                &block.conv2.bias,
                &scale,
                &shift,
            ],
            &block_case,
        )
        .unwrap();
        assert!(worst < 1e-4, "residual block: {worst}");
    }
}
