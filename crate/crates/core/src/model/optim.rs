//! Adam with bias correction and the inverse-square-root warmup schedule.

use serde::{Deserialize, Serialize};

use super::params::ModelParams;
use super::{Float, ModelError, Result};

/// `lr_max · min(step / warmup, sqrt(warmup / step))`, for `step ≥ 1`.
pub fn lr_schedule(step: u64, lr_max: f64, warmup: u64) -> f64 {
    let (s, w) = (step.max(1) as f64, warmup.max(1) as f64);
    lr_max * (s / w).min((w / s).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// First/second moments shaped like the parameters, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
}

impl<T: Float> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        AdamState { step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }
}

/// One Adam update at learning rate `lr`; increments `state.step` first.
pub fn adam_step<T: Float>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads.named() {
        if !g.is_finite() {
            return Err(ModelError::NonFinite(format!("grad {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    // lr · m̂ / (sqrt(v̂) + ε) with m̂ = m / c1, v̂ = v / c2
    let step_size = T::from_f64_lossy(lr / c1);
    let inv_sqrt_c2 = T::from_f64_lossy(1.0 / c2.sqrt());
    let eps = T::from_f64_lossy(cfg.eps);

    let grads = grads.named();
    let ms = state.m.named_mut();
    let vs = state.v.named_mut();
    for ((((name, p), (_, g)), (_, m)), (_, v)) in params.named_mut().into_iter().zip(grads).zip(ms).zip(vs) {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + one_b1 * gi;
            v.data[i] = b2 * v.data[i] + one_b2 * gi * gi;
            p.data[i] -= step_size * m.data[i] / (v.data[i].sqrt() * inv_sqrt_c2 + eps);
        }
        if !p.is_finite() {
            return Err(ModelError::NonFinite(name));
        }
    }
    Ok(())
}
