//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use gmflow_tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment estimates per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(weights: &ParamStore<T>) -> Self {
        let zeros: ParamStore<T> = {
            let mut s = ParamStore::new();
            for (n, t) in weights.iter() {
                s.insert(n.clone(), Tensor::zeros(t.shape()));
            }
            s
        };
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm<T: Real>(grads: &ParamStore<T>) -> f64 {
    grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| v.to_f64().unwrap().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

/// One AdamW update. Every gradient must be finite; otherwise no parameter
/// changes.
pub fn adamw_step<T: Real>(
    weights: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut AdamState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    for (name, g) in grads.iter() {
        if !g.is_finite() {
            return Err(FlowError::Optimizer(format!(
                "non-finite gradient for `{name}` at step {}",
                state.step + 1
            )));
        }
        match weights.get(name) {
            Some(w) if w.shape() == g.shape() => {}
            _ => {
                return Err(FlowError::Optimizer(format!(
                    "gradient `{name}` has no matching parameter"
                )))
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (name, w) in weights.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state.m.get_mut(name).expect("moment for every parameter");
        let m = m.data_mut();
        let v = state.v.get_mut(name).expect("moment for every parameter").data_mut();
        for (((w, &g), m), v) in w
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let g = g.to_f64().unwrap();
            let mn = cfg.beta1 * m.to_f64().unwrap() + (1.0 - cfg.beta1) * g;
            let vn = cfg.beta2 * v.to_f64().unwrap() + (1.0 - cfg.beta2) * g * g;
            *m = T::lit(mn);
            *v = T::lit(vn);
            let update = cfg.lr * (mn / bc1) / ((vn / bc2).sqrt() + cfg.eps);
            *w = T::lit(w.to_f64().unwrap() * decay - update);
        }
    }
    Ok(())
}
