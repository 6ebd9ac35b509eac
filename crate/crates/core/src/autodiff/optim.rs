// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `w <- w - lr * g`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "sgd: {} params vs {} grads",
            params.len(),
            grads.len()
        )));
    }
    if lr == 0.0 {
        return Ok(());
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per named parameter plus the shared step count.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Advances the shared step counter. Call once per optimizer step,
    /// before the per-tensor [`adam_step`] calls.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }
}

/// Bias-corrected Adam update of one named tensor.
pub fn adam_step(name: &str, params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "adam `{name}`: {} params vs {} grads",
            params.len(),
            grads.len()
        )));
    }
    if state.step == 0 {
        return Err(Error::Contract("adam_step before begin_step".into()));
    }
    let m = state
        .first
        .entry(name.to_string())
        .or_insert_with(|| vec![0.0; params.len()]);
    let v = state
        .second
        .entry(name.to_string())
        .or_insert_with(|| vec![0.0; params.len()]);
    if m.len() != params.len() || v.len() != params.len() {
        return Err(Error::Shape(format!("adam `{name}`: moment size changed")));
    }
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        if cfg.lr != 0.0 {
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            params[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
