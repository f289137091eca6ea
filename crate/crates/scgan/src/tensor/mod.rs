//! Dense `f64` tensors and the reverse-mode autodiff tape.
//!
//! [`Tensor`] is a plain owned buffer with a shape of rank 0–4 and an
//! optional gradient. Differentiable computation happens on a [`Tape`]:
//! tensors are bound onto the tape as leaves, ops append nodes, and
//! [`Tape::backward`] walks the node list in reverse. Gradients are routed
//! back to the originating tensors by [`TensorId`]; when one tensor is
//! bound more than once (weight sharing), its contributions are summed.

pub mod check;
mod kernels;
mod tape;

pub use tape::{Tape, Var};

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Maximum tensor rank supported anywhere in the crate.
pub const MAX_RANK: usize = 4;

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

/// Stable identity of a tensor, used to map tape gradients back to
/// parameters. Cloning a tensor clones the id; a tensor rebuilt from raw
/// parts gets a fresh one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

fn fresh_id() -> TensorId {
    TensorId(NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed))
}

/// Dense row-major `f64` tensor, rank 0–4.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    id: TensorId,
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Build a tensor, validating rank, element count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::shape(format!(
                "rank {} exceeds maximum {MAX_RANK}",
                shape.len()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let n = numel_of(&shape);
        if data.len() != n {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor data at index {i}")));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
            id: fresh_id(),
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), vec![0.0; numel_of(shape)])
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), vec![1.0; numel_of(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Tensor::new(shape.to_vec(), vec![value; numel_of(shape)])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![], vec![value])
    }

    /// Gaussian init, `N(0, std^2)` element-wise.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<Self> {
        let data = (0..numel_of(shape))
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. The finiteness invariant is the
    /// caller's to uphold; optimizers re-check via [`Tensor::validate_finite`].
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Sum `delta` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient has {} elements, tensor has {}",
                delta.len(),
                self.data.len()
            )));
        }
        let g = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Scalar value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn validate_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }
}

/// Sum tape gradients into `params`, looked up by tensor id. Parameters
/// absent from `grads` are left untouched.
pub fn apply_grads<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: &HashMap<TensorId, Vec<f64>>,
) -> Result<()> {
    for p in params {
        if let Some(g) = grads.get(&p.id()) {
            p.accumulate_grad(g)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_inputs() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![1, 2, 3, 4, 5], vec![0.0; 120]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn scalar_is_rank_zero() {
        let t = Tensor::scalar(3.5).unwrap();
        assert!(t.shape().is_empty());
        assert_eq!(t.numel(), 1);
        assert_eq!(t.item().unwrap(), 3.5);
    }

    #[test]
    fn clone_keeps_id_new_gets_fresh() {
        let a = Tensor::zeros(&[2]).unwrap();
        let b = a.clone();
        let c = Tensor::zeros(&[2]).unwrap();
        assert_eq!(a.id(), b.id());
        assert_ne!(a.id(), c.id());
    }

    #[test]
    fn grad_accumulates_and_clears() {
        let mut t = Tensor::zeros(&[3]).unwrap();
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }

    #[test]
    fn randn_moments_are_plausible() {
        let mut rng = crate::rng::stream(1, crate::rng::Purpose::Init, 0);
        let t = Tensor::randn(&[10_000], 2.0, &mut rng).unwrap();
        let mean = t.data().iter().sum::<f64>() / 10_000.0;
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 10_000.0;
        assert!(mean.abs() < 0.1, "mean {mean}");
        assert!((var - 4.0).abs() < 0.25, "var {var}");
    }
}
