//! Adam with bias correction.

use crate::error::{McmsError, Result};
use crate::layers::ParamSet;
use crate::tensor::{Real, Tensor4};
use crate::train_eval::loss::LossBreakdown;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Optimizer moments, step counter and per-step loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T = f32> {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub m: Vec<Tensor4<T>>,
    pub v: Vec<Tensor4<T>>,
    pub loss_history: Vec<LossBreakdown>,
}

impl<T: Real> TrainState<T> {
    pub fn new(params: &ParamSet<T>, lr: f64) -> Self {
        let zeros = || params.values().iter().map(|p| Tensor4::zeros(p.shape())).collect();
        TrainState {
            step: 0,
            epoch: 0,
            lr,
            m: zeros(),
            v: zeros(),
            loss_history: Vec::new(),
        }
    }
}

/// One Adam update of every parameter from `grads` (in parameter order).
pub fn adam_step<T: Real>(state: &mut TrainState<T>, params: &mut ParamSet<T>, grads: &[Tensor4<T>]) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(McmsError::InvalidArgument(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, (p, g)) in params.values().iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].shape() != p.shape() {
            return Err(McmsError::shape(
                "adam_step",
                format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for ((p, g), (m, v)) in params
        .values_mut()
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = gi.to_f64_lossy();
            let m1 = BETA1 * mi.to_f64_lossy() + (1.0 - BETA1) * gi;
            let v1 = BETA2 * vi.to_f64_lossy() + (1.0 - BETA2) * gi * gi;
            *mi = T::of(m1);
            *vi = T::of(v1);
            let update = state.lr * (m1 / c1) / ((v1 / c2).sqrt() + EPSILON);
            *pi = T::of(pi.to_f64_lossy() - update);
        }
    }
    Ok(())
}
