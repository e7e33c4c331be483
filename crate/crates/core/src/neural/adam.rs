use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NeuralError, ParamStore, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Parameters absent from `grads` are
/// treated as having zero gradient.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    cfg: AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = store
            .params
            .get(name)
            .ok_or_else(|| NeuralError::Unknown(name.clone()))?;
        if p.len() != g.len() {
            return Err(NeuralError::Shape {
                name: name.clone(),
                detail: format!("gradient of {} for parameter of {}", g.len(), p.len()),
            });
        }
    }
    store.step += 1;
    let t = store.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in store.params.iter_mut() {
        let m = store.first.get_mut(name).expect("moments mirror params");
        let v = store.second.get_mut(name).expect("moments mirror params");
        let g = grads.get(name);
        for i in 0..p.data.len() {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p.data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
