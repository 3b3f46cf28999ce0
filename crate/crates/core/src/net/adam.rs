use serde::{Deserialize, Serialize};

use super::{Gradients, Parameters};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to weight gradients (biases are not decayed).
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<P: Parameters>(params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected ADAM update. Weight decay enters as `λ·w` added to the
/// gradient of decayed tensors.
pub fn adam_step<P: Parameters>(
    params: &mut P,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    let decay = params.decayed();
    let mut tensors = params.tensors_mut();
    if tensors.len() != grads.0.len() || tensors.len() != state.m.len() || tensors.len() != state.v.len() {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    for (i, t) in tensors.iter().enumerate() {
        if t.len() != grads.0[i].len() || t.len() != state.m[i].len() || t.len() != state.v[i].len() {
            return Err(Error::Shape(format!("parameter tensor {i} shape mismatch")));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, t) in tensors.iter_mut().enumerate() {
        let wd = if decay[i] { cfg.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in t.iter_mut().enumerate() {
            let g = grads.0[i][j] + wd * *p;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *p -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
