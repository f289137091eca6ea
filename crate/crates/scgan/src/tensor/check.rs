//! Gradient verification by centered finite differences.
//!
//! `check_gradients` takes a set of input tensors and a closure that builds
//! a scalar objective on a tape, runs one analytic backward pass, then
//! perturbs every input element by `±h` and compares. Used by the test
//! suites for every op, layer and network in the crate.

use std::collections::HashMap;

use super::{Tape, Tensor, TensorId, Var};
use crate::{Error, Result};

/// Builds a scalar objective from leaves bound in the order of `inputs`.
pub type GradCheck<'a> = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a>;

/// Step used for centered differences.
pub const FD_STEP: f64 = 1e-5;

/// Relative error of `analytic` against `numeric`, with a floor on the
/// denominator so near-zero gradients compare on an absolute scale.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn eval(inputs: &[Tensor], build: &GradCheck) -> Result<f64> {
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let root = build(&mut tape, &vars)?;
    tape.item(root)
}

/// Verify gradients of `build` w.r.t. every element of every input; returns
/// the worst relative error observed.
pub fn check_gradients(inputs: &[&Tensor], build: &GradCheck) -> Result<f64> {
    // Work on private copies that all require grad.
    let mut work: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();
    for t in &mut work {
        t.set_requires_grad(true);
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = work.iter().map(|t| tape.leaf(t)).collect();
    let root = build(&mut tape, &vars)?;
    tape.backward(root)?;
    let grads = tape.grads_by_source();

    let mut worst = 0.0f64;
    for idx in 0..work.len() {
        let n = work[idx].numel();
        let zero = vec![0.0; n];
        let analytic = grads.get(&work[idx].id()).unwrap_or(&zero).clone();
        #[allow(clippy::needless_range_loop)] // the body mutates work[idx] by entry
        for j in 0..n {
            let orig = work[idx].data()[j];
            work[idx].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work, build)?;
            work[idx].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work, build)?;
            work[idx].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic[j], numeric));
        }
    }
    Ok(worst)
}

/// Finite-difference verification for parameters living *inside* a model.
///
/// `state_of` exposes the model's named tensors, `eval` recomputes the
/// scalar objective from scratch, and `grads` is the analytic gradient map
/// from one backward pass of the same objective. For each `(name, probes)`
/// pick, up to `probes` elements spread evenly across the tensor are
/// perturbed by `±FD_STEP`. Returns the worst relative error.
pub fn check_model_gradients<M>(
    model: &mut M,
    state_of: &dyn for<'a> Fn(&'a mut M) -> Vec<(String, &'a mut Tensor)>,
    eval: &dyn Fn(&M) -> Result<f64>,
    grads: &HashMap<TensorId, Vec<f64>>,
    picks: &[(&str, usize)],
) -> Result<f64> {
    let mut worst = 0.0f64;
    for &(name, probes) in picks {
        let (id, len) = {
            let state = state_of(model);
            let (_, t) = state
                .into_iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::config(format!("no parameter named {name}")))?;
            (t.id(), t.numel())
        };
        let zero = vec![0.0; len];
        let analytic = grads.get(&id).unwrap_or(&zero);
        let count = probes.min(len).max(1);
        let stride = (len / count).max(1);
        for j in (0..len).step_by(stride).take(count) {
            let orig = {
                let mut state = state_of(model);
                let (_, t) = state.iter_mut().find(|(n, _)| n == name).unwrap();
                let v = t.data()[j];
                t.data_mut()[j] = v + FD_STEP;
                v
            };
            let up = eval(model)?;
            {
                let mut state = state_of(model);
                let (_, t) = state.iter_mut().find(|(n, _)| n == name).unwrap();
                t.data_mut()[j] = orig - FD_STEP;
            }
            let down = eval(model)?;
            {
                let mut state = state_of(model);
                let (_, t) = state.iter_mut().find(|(n, _)| n == name).unwrap();
                t.data_mut()[j] = orig;
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic[j], numeric));
        }
    }
    Ok(worst)
}
