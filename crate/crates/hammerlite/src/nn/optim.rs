//! Adam with decoupled weight decay, and the warmup-plus-cosine learning
//! rate schedule.

use thiserror::Error;

use super::graph::{Grads, ParamSet};
use super::tensor::{Real, Tensor};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGrad { name: String },
}

/// Optimizer state: first and second moments per parameter plus the step
/// counter used for bias correction.
#[derive(Clone, Debug)]
pub struct AdamState<R> {
    m: Vec<Tensor<R>>,
    v: Vec<Tensor<R>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<R: Real> AdamState<R> {
    /// Fresh state with the standard moments (0.9, 0.999, 1e-8) and the given
    /// decoupled weight decay.
    pub fn new(params: &ParamSet<R>, weight_decay: f64) -> Self {
        AdamState {
            m: params.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect(),
            v: params.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update with decoupled decay
/// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * lambda * theta`.
///
/// Rejects non-finite gradients so a diverging run fails loudly instead of
/// poisoning the parameters.
pub fn adam_step<R: Real>(
    params: &mut ParamSet<R>,
    grads: &Grads<R>,
    state: &mut AdamState<R>,
    lr: f64,
) -> Result<(), OptimError> {
    for (pid, g) in grads.iter() {
        if !g.all_finite() {
            return Err(OptimError::NonFiniteGrad { name: params.name(pid).to_string() });
        }
    }

    state.t += 1;
    let b1 = R::from_f64(state.beta1);
    let b2 = R::from_f64(state.beta2);
    let eps = R::from_f64(state.eps);
    let corr1 = R::from_f64(1.0 - state.beta1.powi(state.t as i32));
    let corr2 = R::from_f64(1.0 - state.beta2.powi(state.t as i32));
    let lr_r = R::from_f64(lr);
    let decay = R::from_f64(lr * state.weight_decay);

    for (pid, g) in grads.iter() {
        let m = &mut state.m[pid.0];
        let v = &mut state.v[pid.0];
        let theta = params.tensor_mut(pid);
        for i in 0..theta.len() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (R::ONE - b1) * gi;
            let vi = b2 * v.data()[i] + (R::ONE - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / corr1;
            let v_hat = vi / corr2;
            let p = theta.data_mut();
            p[i] = p[i] - lr_r * m_hat / (v_hat.sqrt() + eps) - decay * p[i];
        }
    }
    Ok(())
}

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to zero at
/// `total`.
#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup: usize, total: usize) -> Self {
        assert!(warmup <= total, "warmup cannot exceed total steps");
        assert!(peak >= 0.0, "negative learning rate");
        LrSchedule { peak, warmup, total }
    }
}

/// Learning rate at `step`; panics outside `0..=total`.
pub fn lr_at(schedule: &LrSchedule, step: usize) -> f64 {
    assert!(step <= schedule.total, "step {step} past schedule end {}", schedule.total);
    if step <= schedule.warmup {
        if schedule.warmup == 0 {
            schedule.peak
        } else {
            schedule.peak * step as f64 / schedule.warmup as f64
        }
    } else {
        let span = (schedule.total - schedule.warmup) as f64;
        let progress = (step - schedule.warmup) as f64 / span;
        schedule.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
