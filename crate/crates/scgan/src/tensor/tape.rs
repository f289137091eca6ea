//! Reverse-mode autodiff on a Wengert list.
//!
//! A [`Tape`] owns a vector of nodes in topological order; every op
//! validates shapes, computes its value eagerly, and appends one node.
//! [`Tape::backward`] seeds the root with 1 and walks the list in reverse,
//! accumulating gradients into input nodes. Leaves bound from tensors with
//! `requires_grad` remember the [`TensorId`] so gradients can be routed
//! back to parameters afterwards; binding the same tensor twice sums its
//! contributions (weight sharing).
//!
//! A [`Var`] is an index into one specific tape and must not be mixed
//! across tapes.

use std::collections::HashMap;

use super::kernels;
use super::{numel_of, Tensor, TensorId, MAX_RANK};
use crate::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Elementwise combination of a tensor with broadcast statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BcKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `k * x + c`; the offset drops out of the gradient, so only the
    /// slope is kept on the node.
    Affine {
        x: Var,
        k: f64,
    },
    Relu(Var),
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Tanh(Var),
    Sqrt(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    AvgPool2(Var),
    /// `[N,C,H,W] -> [N,C]`, mean over H,W.
    SpatialMean(Var),
    /// `[N,C,H,W] -> [C]`, mean over N,H,W.
    BatchChannelMean(Var),
    MeanAll(Var),
    SumAll(Var),
    /// `[1,C,H,W] -> [C,C]`: flatten to `C x HW`, then `psi psi^T / (C*H*W)`.
    Gram(Var),
    Reshape(Var),
    /// `[N,...] -> [1,...]`, one sample.
    SliceBatch {
        x: Var,
        index: usize,
    },
    /// `[N,F] -> [N,len]`, column window.
    NarrowCols {
        x: Var,
        start: usize,
        len: usize,
    },
    /// x `[N,C,H,W]` combined with s `[N,C]`.
    BcastNc {
        x: Var,
        s: Var,
        kind: BcKind,
    },
    /// x `[N,C,H,W]` combined with s `[C]`.
    BcastC {
        x: Var,
        s: Var,
        kind: BcKind,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    source: Option<TensorId>,
}

/// Autodiff tape. Create one per forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    frozen: bool,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            frozen: false,
            backward_done: false,
        }
    }

    /// Tape that records values only; `backward` is an error.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    /// While frozen, `leaf` binds every tensor as a constant. Used to run a
    /// network inside someone else's objective without collecting gradients
    /// for its parameters (gradients still flow *through* the frozen ops).
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel_of(&shape), data.len());
        self.nodes.push(Node {
            op,
            shape,
            data,
            grad: None,
            needs_grad: needs_grad && self.grad_enabled,
            source: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// Bind a tensor. Participates in backward iff the tensor requires
    /// grad and the tape is neither frozen nor inference-only.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let track = t.requires_grad() && !self.frozen;
        let v = self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), track);
        if track {
            self.nodes[v.0].source = Some(t.id());
        }
        v
    }

    /// Bind a tensor as a constant regardless of its `requires_grad`.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, vec![], vec![value], false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.data.len() == 1 {
            Ok(n.data[0])
        } else {
            Err(Error::shape(format!("item() on shape {:?}", n.shape)))
        }
    }

    /// Copy a node out as a tensor (validates finiteness on the way).
    pub fn to_tensor(&self, v: Var) -> Result<Tensor> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.data.clone())
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    // ---- elementwise ----

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.node(a).shape,
                self.node(b).shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let data = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), self.nodes[a.0].shape.clone(), data, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let data = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), self.nodes[a.0].shape.clone(), data, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let data = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), self.nodes[a.0].shape.clone(), data, ng))
    }

    /// `k * x + c`, elementwise with scalar constants.
    pub fn affine(&mut self, x: Var, k: f64, c: f64) -> Result<Var> {
        if !k.is_finite() || !c.is_finite() {
            return Err(Error::NonFinite("affine coefficients".into()));
        }
        let data = self.node(x).data.iter().map(|v| k * v + c).collect();
        let ng = self.needs(x);
        Ok(self.push(Op::Affine { x, k }, self.nodes[x.0].shape.clone(), data, ng))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.node(x).data.iter().map(|v| v.max(0.0)).collect();
        let ng = self.needs(x);
        Ok(self.push(Op::Relu(x), self.nodes[x.0].shape.clone(), data, ng))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::config(format!("leaky_relu slope {slope} not in (0,1)")));
        }
        let data = self
            .node(x)
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let ng = self.needs(x);
        Ok(self.push(Op::LeakyRelu { x, slope }, self.nodes[x.0].shape.clone(), data, ng))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let data = self.node(x).data.iter().map(|v| v.tanh()).collect();
        let ng = self.needs(x);
        Ok(self.push(Op::Tanh(x), self.nodes[x.0].shape.clone(), data, ng))
    }

    /// Elementwise square root; the input must be strictly positive so the
    /// derivative stays finite.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.node(x).data.iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite("sqrt of non-positive value".into()));
        }
        let data = self.node(x).data.iter().map(|v| v.sqrt()).collect();
        let ng = self.needs(x);
        Ok(self.push(Op::Sqrt(x), self.nodes[x.0].shape.clone(), data, ng))
    }

    // ---- structured ops ----

    /// 2-D convolution with square odd kernel and symmetric zero padding.
    /// Output size must divide exactly: `(H + 2*pad - k) % stride == 0`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (
            self.node(x).shape.clone(),
            self.node(w).shape.clone(),
            self.node(b).shape.clone(),
        );
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(Error::shape(format!(
                "conv2d wants x[N,C,H,W] w[O,C,k,k] b[O], got {xs:?} {ws:?} {bs:?}"
            )));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c || kh != kw || bs[0] != o {
            return Err(Error::shape(format!(
                "conv2d mismatch: x{xs:?} w{ws:?} b{bs:?}"
            )));
        }
        let k = kh;
        if k % 2 == 0 {
            return Err(Error::shape(format!("conv2d kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be >= 1"));
        }
        let oh = kernels::conv_out(h, k, stride, pad).ok_or_else(|| {
            Error::shape(format!(
                "conv2d output height not integral: H={h} k={k} stride={stride} pad={pad}"
            ))
        })?;
        let ow = kernels::conv_out(wd, k, stride, pad).ok_or_else(|| {
            Error::shape(format!(
                "conv2d output width not integral: W={wd} k={k} stride={stride} pad={pad}"
            ))
        })?;
        let data = kernels::conv2d_forward(
            &self.node(x).data,
            n,
            c,
            h,
            wd,
            &self.node(w).data,
            o,
            k,
            &self.node(b).data,
            stride,
            pad,
            oh,
            ow,
        );
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, vec![n, o, oh, ow], data, ng))
    }

    /// `y = x w^T + b` with x `[N,F]`, w `[G,F]`, b `[G]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            &self.node(x).shape,
            &self.node(w).shape,
            &self.node(b).shape,
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[1] || bs[0] != ws[0] {
            return Err(Error::shape(format!(
                "linear wants x[N,F] w[G,F] b[G], got {xs:?} {ws:?} {bs:?}"
            )));
        }
        let (n, f, g) = (xs[0], xs[1], ws[0]);
        let data =
            kernels::linear_forward(&self.node(x).data, n, f, &self.node(w).data, g, &self.node(b).data);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Linear { x, w, b }, vec![n, g], data, ng))
    }

    /// Nearest-neighbour upsampling by an integer factor >= 2.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.node(x).shape.clone();
        if xs.len() != 4 {
            return Err(Error::shape(format!("upsample wants rank 4, got {xs:?}")));
        }
        if factor < 2 {
            return Err(Error::shape(format!("upsample factor {factor} must be >= 2")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let data = kernels::upsample_forward(&self.node(x).data, n * c, h, w, factor);
        let ng = self.needs(x);
        Ok(self.push(
            Op::Upsample { x, factor },
            vec![n, c, h * factor, w * factor],
            data,
            ng,
        ))
    }

    /// 2x2 mean pooling with stride 2; spatial extents must be even.
    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.node(x).shape.clone();
        if xs.len() != 4 {
            return Err(Error::shape(format!("avgpool2 wants rank 4, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("avgpool2 needs even extents, got {h}x{w}")));
        }
        let data = kernels::avgpool2_forward(&self.node(x).data, n * c, h, w);
        let ng = self.needs(x);
        Ok(self.push(Op::AvgPool2(x), vec![n, c, h / 2, w / 2], data, ng))
    }

    /// Mean over the spatial plane: `[N,C,H,W] -> [N,C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let xs = self.node(x).shape.clone();
        if xs.len() != 4 {
            return Err(Error::shape(format!("spatial_mean wants rank 4, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let plane = h * w;
        let xd = &self.node(x).data;
        let data = (0..n * c)
            .map(|p| xd[p * plane..(p + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let ng = self.needs(x);
        Ok(self.push(Op::SpatialMean(x), vec![n, c], data, ng))
    }

    /// Mean over batch and spatial axes: `[N,C,H,W] -> [C]`.
    pub fn batch_channel_mean(&mut self, x: Var) -> Result<Var> {
        let xs = self.node(x).shape.clone();
        if xs.len() != 4 {
            return Err(Error::shape(format!(
                "batch_channel_mean wants rank 4, got {xs:?}"
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let plane = h * w;
        let xd = &self.node(x).data;
        let mut data = vec![0.0; c];
        for img in 0..n {
            for ch in 0..c {
                data[ch] += xd[(img * c + ch) * plane..][..plane].iter().sum::<f64>();
            }
        }
        let denom = (n * plane) as f64;
        for v in &mut data {
            *v /= denom;
        }
        let ng = self.needs(x);
        Ok(self.push(Op::BatchChannelMean(x), vec![c], data, ng))
    }

    /// Per-(sample, channel) mean and biased variance over the spatial
    /// plane, as two `[N,C]` nodes. Composite of primitive ops, so both
    /// outputs are differentiable.
    pub fn spatial_moments(&mut self, x: Var) -> Result<(Var, Var)> {
        let mean = self.spatial_mean(x)?;
        let centered = self.sub_nc(x, mean)?;
        let sq = self.mul(centered, centered)?;
        let var = self.spatial_mean(sq)?;
        Ok((mean, var))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x).data.len();
        let v = self.node(x).data.iter().sum::<f64>() / n as f64;
        let ng = self.needs(x);
        Ok(self.push(Op::MeanAll(x), vec![], vec![v], ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let v = self.node(x).data.iter().sum::<f64>();
        let ng = self.needs(x);
        Ok(self.push(Op::SumAll(x), vec![], vec![v], ng))
    }

    /// Gram matrix of a single feature map: flatten `[1,C,H,W]` to
    /// `C x HW` and return `psi psi^T / (C*H*W)` as `[C,C]`.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let xs = self.node(x).shape.clone();
        if xs.len() != 4 || xs[0] != 1 {
            return Err(Error::shape(format!("gram wants [1,C,H,W], got {xs:?}")));
        }
        let (c, hw) = (xs[1], xs[2] * xs[3]);
        let nl = (c * hw) as f64;
        let xd = &self.node(x).data;
        let mut g = vec![0.0; c * c];
        // g = psi . psi^T / nl
        unsafe {
            matrixmultiply::dgemm(
                c,
                hw,
                c,
                1.0 / nl,
                xd.as_ptr(),
                hw as isize,
                1,
                xd.as_ptr(),
                1,
                hw as isize,
                0.0,
                g.as_mut_ptr(),
                c as isize,
                1,
            );
        }
        let ng = self.needs(x);
        Ok(self.push(Op::Gram(x), vec![c, c], g, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.len() > MAX_RANK {
            return Err(Error::shape(format!("reshape to rank {}", shape.len())));
        }
        if numel_of(shape) != self.node(x).data.len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.node(x).shape
            )));
        }
        let data = self.node(x).data.clone();
        let ng = self.needs(x);
        Ok(self.push(Op::Reshape(x), shape.to_vec(), data, ng))
    }

    /// Select one sample: `[N,...] -> [1,...]`.
    pub fn slice_batch(&mut self, x: Var, index: usize) -> Result<Var> {
        let xs = self.node(x).shape.clone();
        if xs.is_empty() {
            return Err(Error::shape("slice_batch on rank 0"));
        }
        if index >= xs[0] {
            return Err(Error::shape(format!(
                "slice_batch index {index} out of {}",
                xs[0]
            )));
        }
        let block = self.node(x).data.len() / xs[0];
        let data = self.node(x).data[index * block..(index + 1) * block].to_vec();
        let mut shape = xs;
        shape[0] = 1;
        let ng = self.needs(x);
        Ok(self.push(Op::SliceBatch { x, index }, shape, data, ng))
    }

    /// Column window of a matrix: `[N,F] -> [N,len]`.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.node(x).shape.clone();
        if xs.len() != 2 {
            return Err(Error::shape(format!("narrow_cols wants rank 2, got {xs:?}")));
        }
        let (n, f) = (xs[0], xs[1]);
        if len == 0 || start + len > f {
            return Err(Error::shape(format!(
                "narrow_cols [{start}, {start}+{len}) out of {f} columns"
            )));
        }
        let xd = &self.node(x).data;
        let mut data = Vec::with_capacity(n * len);
        for row in 0..n {
            data.extend_from_slice(&xd[row * f + start..row * f + start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(Op::NarrowCols { x, start, len }, vec![n, len], data, ng))
    }

    // ---- broadcast ops ----

    fn bcast_nc(&mut self, x: Var, s: Var, kind: BcKind) -> Result<Var> {
        let xs = self.node(x).shape.clone();
        let ss = self.node(s).shape.clone();
        if xs.len() != 4 || ss.len() != 2 || ss[0] != xs[0] || ss[1] != xs[1] {
            return Err(Error::shape(format!(
                "per-sample-channel broadcast: x{xs:?} s{ss:?}"
            )));
        }
        if kind == BcKind::Div && self.node(s).data.contains(&0.0) {
            return Err(Error::NonFinite("division by zero statistic".into()));
        }
        let plane = xs[2] * xs[3];
        let xd = &self.node(x).data;
        let sd = &self.node(s).data;
        let mut data = Vec::with_capacity(xd.len());
        for p in 0..xs[0] * xs[1] {
            let sv = sd[p];
            data.extend(xd[p * plane..(p + 1) * plane].iter().map(|&v| apply(kind, v, sv)));
        }
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(Op::BcastNc { x, s, kind }, xs, data, ng))
    }

    fn bcast_c(&mut self, x: Var, s: Var, kind: BcKind) -> Result<Var> {
        let xs = self.node(x).shape.clone();
        let ss = self.node(s).shape.clone();
        if xs.len() != 4 || ss.len() != 1 || ss[0] != xs[1] {
            return Err(Error::shape(format!("per-channel broadcast: x{xs:?} s{ss:?}")));
        }
        if kind == BcKind::Div && self.node(s).data.contains(&0.0) {
            return Err(Error::NonFinite("division by zero statistic".into()));
        }
        let (n, c) = (xs[0], xs[1]);
        let plane = xs[2] * xs[3];
        let xd = &self.node(x).data;
        let sd = &self.node(s).data;
        let mut data = Vec::with_capacity(xd.len());
        for p in 0..n * c {
            let sv = sd[p % c];
            data.extend(xd[p * plane..(p + 1) * plane].iter().map(|&v| apply(kind, v, sv)));
        }
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(Op::BcastC { x, s, kind }, xs, data, ng))
    }

    /// x + s with s broadcast per sample and channel (`[N,C]`).
    pub fn add_nc(&mut self, x: Var, s: Var) -> Result<Var> {
        self.bcast_nc(x, s, BcKind::Add)
    }
    pub fn sub_nc(&mut self, x: Var, s: Var) -> Result<Var> {
        self.bcast_nc(x, s, BcKind::Sub)
    }
    pub fn mul_nc(&mut self, x: Var, s: Var) -> Result<Var> {
        self.bcast_nc(x, s, BcKind::Mul)
    }
    pub fn div_nc(&mut self, x: Var, s: Var) -> Result<Var> {
        self.bcast_nc(x, s, BcKind::Div)
    }

    /// x + s with s broadcast per channel (`[C]`).
    pub fn add_c(&mut self, x: Var, s: Var) -> Result<Var> {
        self.bcast_c(x, s, BcKind::Add)
    }
    pub fn sub_c(&mut self, x: Var, s: Var) -> Result<Var> {
        self.bcast_c(x, s, BcKind::Sub)
    }
    pub fn mul_c(&mut self, x: Var, s: Var) -> Result<Var> {
        self.bcast_c(x, s, BcKind::Mul)
    }
    pub fn div_c(&mut self, x: Var, s: Var) -> Result<Var> {
        self.bcast_c(x, s, BcKind::Div)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. One shot per tape.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Autodiff("backward on an inference tape".into()));
        }
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward called twice on the same tape".into(),
            ));
        }
        if self.nodes.is_empty() {
            return Err(Error::Autodiff("backward on an empty tape".into()));
        }
        if self.nodes[root.0].data.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        self.backward_done = true;
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            self.backprop_node(i);
        }
        Ok(())
    }

    /// Gradients of bound tensors, summed per [`TensorId`] across all the
    /// leaves that share it.
    pub fn grads_by_source(&self) -> HashMap<TensorId, Vec<f64>> {
        let mut out: HashMap<TensorId, Vec<f64>> = HashMap::new();
        for node in &self.nodes {
            let (Some(src), Some(g)) = (node.source, node.grad.as_deref()) else {
                continue;
            };
            match out.entry(src) {
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    for (acc, d) in e.get_mut().iter_mut().zip(g) {
                        *acc += d;
                    }
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(g.to_vec());
                }
            }
        }
        out
    }

    fn backprop_node(&mut self, i: usize) {
        let (prev, rest) = self.nodes.split_at_mut(i);
        let node = &rest[0];
        if !node.needs_grad {
            return;
        }
        let Some(gout) = node.grad.as_deref() else {
            return;
        };
        let op = node.op;

        // Contributions are computed with only immutable borrows, then
        // accumulated; this keeps aliasing sound when an op reads the same
        // node it writes (e.g. mul(x, x)).
        let mut contributions: Vec<(Var, Vec<f64>)> = Vec::with_capacity(2);
        let val = |v: Var| -> &[f64] { &prev[v.0].data };
        let needs = |v: Var| -> bool { prev[v.0].needs_grad };

        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(a) {
                    contributions.push((a, gout.to_vec()));
                }
                if needs(b) {
                    contributions.push((b, gout.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    contributions.push((a, gout.to_vec()));
                }
                if needs(b) {
                    contributions.push((b, gout.iter().map(|g| -g).collect()));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    contributions.push((a, gout.iter().zip(val(b)).map(|(g, v)| g * v).collect()));
                }
                if needs(b) {
                    contributions.push((b, gout.iter().zip(val(a)).map(|(g, v)| g * v).collect()));
                }
            }
            Op::Affine { x, k } => {
                if needs(x) {
                    contributions.push((x, gout.iter().map(|g| k * g).collect()));
                }
            }
            Op::Relu(x) => {
                if needs(x) {
                    let d = gout
                        .iter()
                        .zip(&node.data)
                        .map(|(g, &y)| if y > 0.0 { *g } else { 0.0 })
                        .collect();
                    contributions.push((x, d));
                }
            }
            Op::LeakyRelu { x, slope } => {
                if needs(x) {
                    let d = gout
                        .iter()
                        .zip(&node.data)
                        .map(|(g, &y)| if y > 0.0 { *g } else { slope * g })
                        .collect();
                    contributions.push((x, d));
                }
            }
            Op::Tanh(x) => {
                if needs(x) {
                    let d = gout
                        .iter()
                        .zip(&node.data)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    contributions.push((x, d));
                }
            }
            Op::Sqrt(x) => {
                if needs(x) {
                    let d = gout
                        .iter()
                        .zip(&node.data)
                        .map(|(g, y)| 0.5 * g / y)
                        .collect();
                    contributions.push((x, d));
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = &prev[x.0].shape;
                let ws = &prev[w.0].shape;
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, k) = (ws[0], ws[2]);
                let (oh, ow) = (node.shape[2], node.shape[3]);
                let (dx, dw, db) = kernels::conv2d_backward(
                    val(x),
                    n,
                    c,
                    h,
                    wd,
                    val(w),
                    o,
                    k,
                    stride,
                    pad,
                    oh,
                    ow,
                    gout,
                    needs(x),
                    needs(w),
                    needs(b),
                );
                if let Some(d) = dx {
                    contributions.push((x, d));
                }
                if let Some(d) = dw {
                    contributions.push((w, d));
                }
                if let Some(d) = db {
                    contributions.push((b, d));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = &prev[x.0].shape;
                let (n, f, g) = (xs[0], xs[1], prev[w.0].shape[0]);
                let (dx, dw, db) = kernels::linear_backward(
                    val(x),
                    n,
                    f,
                    val(w),
                    g,
                    gout,
                    needs(x),
                    needs(w),
                    needs(b),
                );
                if let Some(d) = dx {
                    contributions.push((x, d));
                }
                if let Some(d) = dw {
                    contributions.push((w, d));
                }
                if let Some(d) = db {
                    contributions.push((b, d));
                }
            }
            Op::Upsample { x, factor } => {
                if needs(x) {
                    let xs = &prev[x.0].shape;
                    let d = kernels::upsample_backward(gout, xs[0] * xs[1], xs[2], xs[3], factor);
                    contributions.push((x, d));
                }
            }
            Op::AvgPool2(x) => {
                if needs(x) {
                    let xs = &prev[x.0].shape;
                    let d = kernels::avgpool2_backward(gout, xs[0] * xs[1], xs[2], xs[3]);
                    contributions.push((x, d));
                }
            }
            Op::SpatialMean(x) => {
                if needs(x) {
                    let xs = &prev[x.0].shape;
                    let plane = xs[2] * xs[3];
                    let scale = 1.0 / plane as f64;
                    let mut d = Vec::with_capacity(prev[x.0].data.len());
                    for &g in gout {
                        d.extend(std::iter::repeat_n(g * scale, plane));
                    }
                    contributions.push((x, d));
                }
            }
            Op::BatchChannelMean(x) => {
                if needs(x) {
                    let xs = &prev[x.0].shape;
                    let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                    let scale = 1.0 / (n * plane) as f64;
                    let mut d = Vec::with_capacity(n * c * plane);
                    for _ in 0..n {
                        for &g in gout.iter().take(c) {
                            d.extend(std::iter::repeat_n(g * scale, plane));
                        }
                    }
                    contributions.push((x, d));
                }
            }
            Op::MeanAll(x) => {
                if needs(x) {
                    let n = prev[x.0].data.len();
                    contributions.push((x, vec![gout[0] / n as f64; n]));
                }
            }
            Op::SumAll(x) => {
                if needs(x) {
                    let n = prev[x.0].data.len();
                    contributions.push((x, vec![gout[0]; n]));
                }
            }
            Op::Gram(x) => {
                if needs(x) {
                    let xs = &prev[x.0].shape;
                    let (c, hw) = (xs[1], xs[2] * xs[3]);
                    let nl = (c * hw) as f64;
                    // dpsi = (dG + dG^T) psi / nl
                    let mut m = vec![0.0; c * c];
                    for r in 0..c {
                        for q in 0..c {
                            m[r * c + q] = gout[r * c + q] + gout[q * c + r];
                        }
                    }
                    let mut d = vec![0.0; c * hw];
                    unsafe {
                        matrixmultiply::dgemm(
                            c,
                            c,
                            hw,
                            1.0 / nl,
                            m.as_ptr(),
                            c as isize,
                            1,
                            prev[x.0].data.as_ptr(),
                            hw as isize,
                            1,
                            0.0,
                            d.as_mut_ptr(),
                            hw as isize,
                            1,
                        );
                    }
                    contributions.push((x, d));
                }
            }
            Op::Reshape(x) => {
                if needs(x) {
                    contributions.push((x, gout.to_vec()));
                }
            }
            Op::SliceBatch { x, index } => {
                if needs(x) {
                    let total = prev[x.0].data.len();
                    let block = gout.len();
                    let mut d = vec![0.0; total];
                    d[index * block..(index + 1) * block].copy_from_slice(gout);
                    contributions.push((x, d));
                }
            }
            Op::NarrowCols { x, start, len } => {
                if needs(x) {
                    let f = prev[x.0].shape[1];
                    let n = prev[x.0].shape[0];
                    let mut d = vec![0.0; n * f];
                    for row in 0..n {
                        d[row * f + start..row * f + start + len]
                            .copy_from_slice(&gout[row * len..(row + 1) * len]);
                    }
                    contributions.push((x, d));
                }
            }
            Op::BcastNc { x, s, kind } => {
                let xs = &prev[x.0].shape;
                let plane = xs[2] * xs[3];
                let groups = xs[0] * xs[1];
                bcast_backward(
                    kind, gout, val(x), val(s), plane, groups,
                    |p| p, // group p uses s[p]
                    needs(x), needs(s),
                    &mut contributions, x, s,
                );
            }
            Op::BcastC { x, s, kind } => {
                let xs = &prev[x.0].shape;
                let plane = xs[2] * xs[3];
                let groups = xs[0] * xs[1];
                let c = xs[1];
                bcast_backward(
                    kind, gout, val(x), val(s), plane, groups,
                    move |p| p % c,
                    needs(x), needs(s),
                    &mut contributions, x, s,
                );
            }
        }

        for (target, delta) in contributions {
            let tgt = &mut prev[target.0];
            match tgt.grad.as_deref_mut() {
                Some(g) => {
                    for (acc, d) in g.iter_mut().zip(&delta) {
                        *acc += d;
                    }
                }
                None => tgt.grad = Some(delta),
            }
        }
    }
}

fn apply(kind: BcKind, x: f64, s: f64) -> f64 {
    match kind {
        BcKind::Add => x + s,
        BcKind::Sub => x - s,
        BcKind::Mul => x * s,
        BcKind::Div => x / s,
    }
}

/// Shared backward for the two broadcast shapes. `slot(p)` maps a plane
/// group (flattened n*c index) to the statistic index it consumed.
#[allow(clippy::too_many_arguments)]
fn bcast_backward(
    kind: BcKind,
    gout: &[f64],
    xd: &[f64],
    sd: &[f64],
    plane: usize,
    groups: usize,
    slot: impl Fn(usize) -> usize,
    need_x: bool,
    need_s: bool,
    contributions: &mut Vec<(Var, Vec<f64>)>,
    x: Var,
    s: Var,
) {
    if need_x {
        let mut d = Vec::with_capacity(xd.len());
        for p in 0..groups {
            let sv = sd[slot(p)];
            let g = &gout[p * plane..(p + 1) * plane];
            match kind {
                BcKind::Add | BcKind::Sub => d.extend_from_slice(g),
                BcKind::Mul => d.extend(g.iter().map(|gi| gi * sv)),
                BcKind::Div => d.extend(g.iter().map(|gi| gi / sv)),
            }
        }
        contributions.push((x, d));
    }
    if need_s {
        let mut d = vec![0.0; sd.len()];
        for p in 0..groups {
            let sv = sd[slot(p)];
            let g = &gout[p * plane..(p + 1) * plane];
            let xp = &xd[p * plane..(p + 1) * plane];
            let acc: f64 = match kind {
                BcKind::Add => g.iter().sum(),
                BcKind::Sub => -g.iter().sum::<f64>(),
                BcKind::Mul => g.iter().zip(xp).map(|(gi, xi)| gi * xi).sum(),
                BcKind::Div => g.iter().zip(xp).map(|(gi, xi)| -gi * xi / (sv * sv)).sum(),
            };
            d[slot(p)] += acc;
        }
        contributions.push((s, d));
    }
}
