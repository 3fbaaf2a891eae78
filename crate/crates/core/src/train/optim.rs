use std::collections::HashMap;
use std::f64::consts::PI;

use crate::autodiff::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, created zeroed on first use.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW step over every parameter that received a gradient:
/// `θ ← θ − lr (m̂ / (√v̂ + ε) + wd θ)`. `decay(name)` selects the
/// parameters subject to weight decay.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    wd: f64,
    cfg: AdamWConfig,
    decay: impl Fn(&str) -> bool,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads.params() {
        let Some(p) = store.get_mut(name) else { continue };
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        let wd_here = if decay(name) { wd } else { 0.0 };
        for (k, th) in p.value_mut().data_mut().iter_mut().enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            *th -= lr * (mh / (vh.sqrt() + cfg.eps) + wd_here * *th);
        }
    }
}

/// Cosine annealing from `base` at step 0 to `min` at `total`.
pub fn cosine_lr(step: usize, total: usize, base: f64, min: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let s = step.min(total) as f64 / total as f64;
    min + 0.5 * (base - min) * (1.0 + (PI * s).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5) - 0.5 * (1e-3 + 1e-5)).abs() < 1e-15);
    }
}
