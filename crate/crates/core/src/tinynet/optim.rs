//! Adaptive-moment optimizer with decoupled weight decay (AdamW).

use serde::{Deserialize, Serialize};

use super::net::{DenseNet, GradientBundle};
use crate::error::{MhsaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    step: u64,
    first_moment: GradientBundle,
    second_moment: GradientBundle,
}

impl OptimizerState {
    pub fn new(net: &DenseNet, config: AdamWConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            first_moment: GradientBundle::zeros_like(net),
            second_moment: GradientBundle::zeros_like(net),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// Applies one AdamW update to `net` in place.
///
/// With `lr == 0` the parameters are left bit-for-bit untouched.
pub fn step(net: &mut DenseNet, grads: &GradientBundle, state: &mut OptimizerState) -> Result<()> {
    let congruent = |a: &[&[f64]], b: &[&[f64]]| {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len())
    };
    if !congruent(&net.param_slices(), &grads.slices())
        || !congruent(&net.param_slices(), &state.first_moment.slices())
    {
        return Err(MhsaError::shape(
            "gradients congruent with the network",
            "mismatched bundle",
        ));
    }
    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);

    let grad_slices = grads.slices();
    let mut m_slices = state.first_moment.slices_mut();
    let mut v_slices = state.second_moment.slices_mut();
    if cfg.lr == 0.0 {
        for ((m, v), g) in m_slices
            .iter_mut()
            .zip(v_slices.iter_mut())
            .zip(&grad_slices)
        {
            for i in 0..g.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            }
        }
        return Ok(());
    }
    let mut params = net.param_slices_mut();
    for (((p, m), v), g) in params
        .iter_mut()
        .zip(m_slices.iter_mut())
        .zip(v_slices.iter_mut())
        .zip(&grad_slices)
    {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] -= cfg.lr * cfg.weight_decay * p[i];
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
