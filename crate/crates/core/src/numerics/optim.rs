//! Adam with decoupled weight decay and optional global-norm clipping.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{c, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 1e-4, clip_norm: None }
    }
}

/// First/second moment accumulators and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: IndexMap<String, Tensor<T>>,
    pub second: IndexMap<String, Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: IndexMap::new(), second: IndexMap::new() }
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.first.clear();
        self.second.clear();
    }
}

/// One bias-corrected Adam update over every parameter with a gradient.
/// Weight decay is applied to all parameters, including those without a
/// gradient this step.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    let cfg = state.config;
    let clip_scale = match cfg.clip_norm {
        Some(max) => {
            let total: f64 = grads
                .values()
                .flat_map(|g| g.data().iter())
                .map(|v| {
                    let v = v.to_f64().unwrap_or(0.0);
                    v * v
                })
                .sum::<f64>()
                .sqrt();
            if total > max {
                max / total
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let (b1, b2, eps): (T, T, T) = (c(cfg.beta1), c(cfg.beta2), c(cfg.eps));
    let (lr_t, decay): (T, T) = (c(lr), c(lr * cfg.weight_decay));
    let (bc1, bc2): (T, T) = (c(bc1), c(bc2));
    let scale: T = c(clip_scale);

    for (name, p) in params.iter_mut() {
        if cfg.weight_decay > 0.0 {
            for v in p.data_mut() {
                *v -= decay * *v;
            }
        }
        let Some(g) = grads.get(name) else { continue };
        let m = state.first.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
        let s = state.second.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
        if m.shape() != p.shape() || s.shape() != p.shape() {
            return Err(Error::shape("adam_state", m.shape(), p.shape()));
        }
        let (md, sd) = (m.data_mut(), s.data_mut());
        for (((pv, &gv), mv), sv) in p.data_mut().iter_mut().zip(g.data()).zip(md).zip(sd) {
            let gv = gv * scale;
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *sv = b2 * *sv + (T::one() - b2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *sv / bc2;
            *pv -= lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_f64(&[values.len()], values).unwrap());
        p
    }

    fn grads(values: &[f64]) -> IndexMap<String, Tensor<f64>> {
        let mut g = IndexMap::new();
        g.insert("w".to_string(), Tensor::from_f64(&[values.len()], values).unwrap());
        g
    }

    fn no_decay() -> AdamConfig {
        AdamConfig { weight_decay: 0.0, ..AdamConfig::default() }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store(&[1.0, -2.0]);
        let mut st = OptimizerState::new(no_decay());
        adam_step(&mut p, &grads(&[0.0, 0.0]), &mut st, 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let lr = 0.01;
        let mut p = store(&[0.0, 0.0, 0.0]);
        let mut st = OptimizerState::new(no_decay());
        adam_step(&mut p, &grads(&[3.0, -0.5, 1e-2]), &mut st, lr).unwrap();
        let w = p.get("w").unwrap().data();
        for (got, sign) in w.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((got - sign * lr).abs() < 1e-6 * lr, "{got}");
        }
    }

    #[test]
    fn first_step_displacement_linear_in_lr() {
        let g = grads(&[0.7, -0.2]);
        let mut disp = Vec::new();
        for lr in [1e-3, 2e-3] {
            let mut p = store(&[0.5, 0.5]);
            let mut st = OptimizerState::new(no_decay());
            adam_step(&mut p, &g, &mut st, lr).unwrap();
            disp.push(p.get("w").unwrap().data()[0] - 0.5);
        }
        assert!((disp[1] - 2.0 * disp[0]).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks_without_touching_moments() {
        let mut p = store(&[2.0]);
        let mut st = OptimizerState::new(AdamConfig::default());
        adam_step(&mut p, &grads(&[0.0]), &mut st, 0.5).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 2.0 * (1.0 - 0.5 * 1e-4)).abs() < 1e-15);
        assert_eq!(st.first["w"].data(), &[0.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = store(&[1.0, 2.0]);
        let mut st = OptimizerState::new(no_decay());
        assert!(adam_step(&mut p, &grads(&[1.0]), &mut st, 0.1).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping_bounds_the_update_norm() {
        let cfg = AdamConfig { clip_norm: Some(0.1), ..no_decay() };
        let mut st = OptimizerState::new(cfg);
        let mut p = store(&[0.0]);
        adam_step(&mut p, &grads(&[100.0]), &mut st, 1.0).unwrap();
        // first-step Adam is scale invariant, but the moments see the clipped value
        assert!((st.first["w"].data()[0] - 0.1 * 0.1).abs() < 1e-12);
    }
}
