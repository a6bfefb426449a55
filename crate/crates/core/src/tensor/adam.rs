//! Adam optimizer with bias-corrected first and second moments.

use super::{Array, ParamSet};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy)]
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

/// Optimizer state: per-parameter first (`m`) and second (`v`) moment
/// estimates plus the shared step counter.
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Adam> {
        if !(cfg.lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "adam learning rate must be positive, got {}",
                cfg.lr
            )));
        }
        for (name, b) in [("beta1", cfg.beta1), ("beta2", cfg.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!(
                    "adam {name} must be in [0, 1), got {b}"
                )));
            }
        }
        Ok(Adam {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update. Parameters without a gradient entry are treated as
    /// having zero gradient: on a fresh state that leaves them bit-identical
    /// (m = v = 0 gives a zero step), afterwards momentum decays as usual.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Array>) -> Result<()> {
        for name in grads.keys() {
            if !params.contains(name) {
                return Err(Error::InvalidArgument(format!(
                    "gradient provided for unknown parameter {name}"
                )));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, value) in params.iter_mut() {
            let n = value.numel();
            if let Some(g) = grads.get(name) {
                if g.shape() != value.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "adam_step",
                        lhs: value.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let data = value.data_mut();
            let zero = [];
            let gdata: &[f64] = grads.get(name).map(|g| g.data()).unwrap_or(&zero);
            for i in 0..n {
                let gi = if gdata.is_empty() { 0.0 } else { gdata[i] };
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * gi;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
