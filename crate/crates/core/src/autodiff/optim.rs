//! AdamW with linear warmup and cosine decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::TensorError;

/// Optimizer hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub peak_lr: f64,
    /// Fraction of `total_steps` spent in linear warmup.
    pub warmup_fraction: f64,
    pub total_steps: u64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self::paper_pretrain(10_000)
    }
}

impl AdamWConfig {
    /// Large-scale pre-training settings: lr 5e-5, betas (0.9, 0.95), 3% warmup.
    pub fn paper_pretrain(total_steps: u64) -> Self {
        Self {
            peak_lr: 5e-5,
            warmup_fraction: 0.03,
            total_steps,
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }

    /// Fine-tuning settings: lr 1e-4, weight decay 1e-5.
    pub fn finetune(total_steps: u64) -> Self {
        Self {
            peak_lr: 1e-4,
            weight_decay: 1e-5,
            ..Self::paper_pretrain(total_steps)
        }
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64).ceil() as u64
    }

    /// Learning rate applied by the update with zero-based index `step`.
    ///
    /// Rises linearly from 0 over the warmup, then follows a half cosine that
    /// reaches exactly 0 on the final step.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = self.warmup_steps();
        if step < warm {
            return self.peak_lr * step as f64 / warm as f64;
        }
        let span = self.total_steps.saturating_sub(1).saturating_sub(warm).max(1);
        let progress = ((step - warm) as f64 / span as f64).min(1.0);
        self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// First/second moment buffers for one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    /// Keyed by parameter name so state survives model re-construction.
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }
}

/// One AdamW update of `ids` using their accumulated gradients; returns the lr used.
///
/// Weight decay is decoupled and applied only to parameters registered with
/// `decay = true`. Every id must be trainable and carry a gradient.
pub fn adamw_step(store: &mut ParamStore, ids: &[ParamId], state: &mut OptimizerState) -> Result<f64, TensorError> {
    for &id in ids {
        if !store.is_trainable(id) || store.grad(id).is_none() {
            return Err(TensorError::MissingGrad(store.name(id).to_string()));
        }
    }
    let cfg = state.config.clone();
    let lr = cfg.lr_at(state.step);
    let (b1, b2) = cfg.betas;
    for &id in ids {
        let name = store.name(id).to_string();
        let grad = store.grad(id).expect("checked above").data().to_vec();
        let decay = store.decays(id);
        let n = grad.len();
        let mom = state.moments.entry(name).or_insert_with(|| Moments {
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        mom.t += 1;
        let bc1 = 1.0 - b1.powi(mom.t as i32);
        let bc2 = 1.0 - b2.powi(mom.t as i32);
        let value = store.value_mut(id).data_mut();
        for i in 0..n {
            if decay {
                value[i] -= lr * cfg.weight_decay * value[i];
            }
            let g = grad[i];
            mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * g;
            mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * g * g;
            let mhat = mom.m[i] / bc1;
            let vhat = mom.v[i] / bc2;
            value[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    state.step += 1;
    Ok(lr)
}
