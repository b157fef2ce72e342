use serde::{Deserialize, Serialize};

use super::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over every non-frozen parameter.
/// Moments live in the store so consecutive calls continue the same trajectory.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) {
    store.adam_steps += 1;
    let t = store.adam_steps as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (_, p) in store.params_mut() {
        if p.frozen {
            continue;
        }
        let n = p.value.len();
        for i in 0..n {
            let g = p.grad.data()[i];
            let m = cfg.beta1 * p.m.data()[i] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * p.v.data()[i] + (1.0 - cfg.beta2) * g * g;
            p.m.data_mut()[i] = m;
            p.v.data_mut()[i] = v;
            let update = cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
            p.value.data_mut()[i] -= update;
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        store.scale_grads(max_norm / norm);
    }
    norm
}
