//! Adam with an inverse-square-root learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{RederError, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

impl Schedule {
    /// `peak · min(s / warmup, sqrt(warmup / s))` for update `s ≥ 1`.
    pub fn lr(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        self.peak_lr * (s / w).min((w / s).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub schedule: Schedule,
    pub m: ModelParams,
    pub v: ModelParams,
    /// Updates applied so far.
    pub step: u64,
}

impl Adam {
    pub fn new(params: &ModelParams, config: AdamConfig, schedule: Schedule) -> Self {
        let zeros = params.map(|t| Tensor::zeros(t.shape()));
        Self {
            config,
            schedule,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One bias-corrected update. Non-finite gradients abort before any
    /// parameter changes. Returns the pre-clip gradient norm.
    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<f64> {
        let mut sq = 0.0;
        for (name, g) in grads.named() {
            if !g.all_finite() {
                return Err(RederError::NonFinite(format!(
                    "gradient of {name} at update {}",
                    self.step + 1
                )));
            }
            sq += g.data().iter().map(|x| x * x).sum::<f64>();
        }
        let norm = sq.sqrt();
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let lr = self.schedule.lr(self.step);
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let names = grads.named();
        let iter = params.iter_mut().zip(self.m.iter_mut()).zip(self.v.iter_mut()).zip(names);
        for (((p, m), v), (_, g)) in iter {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i] * clip;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}
