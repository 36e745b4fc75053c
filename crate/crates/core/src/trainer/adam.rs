use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers laid out like the parameter store.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub first_moment: ParamStore,
    pub second_moment: ParamStore,
    pub step: u64,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        OptimizerState {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update from the gradients accumulated in
/// `params`. Parameters without a gradient buffer see a zero gradient.
pub fn adam_step(params: &mut ParamStore, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if !params.same_layout(&state.first_moment) || !params.same_layout(&state.second_moment) {
        return Err(Error::shape("adam_step", "optimizer buffers do not match parameters"));
    }
    for id in params.ids() {
        if let Some(g) = params.get(id).grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(params.name(id).to_string()));
            }
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for id in params.ids() {
        let n = params.get(id).len();
        let g = params.get(id).grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let m = state.first_moment.get_mut(id).data_mut();
        for (mi, gi) in m.iter_mut().zip(&g) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
        }
        let v = state.second_moment.get_mut(id).data_mut();
        for (vi, gi) in v.iter_mut().zip(&g) {
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
        }
        let m = state.first_moment.get(id).data().to_vec();
        let v = state.second_moment.get(id).data();
        let p = params.get_mut(id).data_mut();
        for i in 0..n {
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|(_, _, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let t = params.get_mut(id);
            if let Some(g) = t.grad().map(<[f64]>::to_vec) {
                let delta: Vec<f64> = g.iter().map(|v| v * (s - 1.0)).collect();
                t.accumulate_grad(&delta).unwrap();
            }
        }
    }
    norm
}
