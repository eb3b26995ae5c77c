//! Adam with decoupled weight decay, and the learning-rate and EMA schedules.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{DamaError, Result};
use crate::model::ParamStore;

/// EMA coefficient at the first step.
pub const EMA_START: f64 = 0.996;

/// Linear warmup from 0 to `base` over `warmup_steps`, then cosine decay to
/// `min` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub min: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            return self.base * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.min;
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        self.min + (self.base - self.min) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// Teacher momentum, cosine from 0.996 at step 0 to 1 at `total`.
pub fn lambda_at(step: u64, total: u64) -> f64 {
    if total == 0 {
        return 1.0;
    }
    let t = step.min(total) as f64 / total as f64;
    1.0 - (1.0 - EMA_START) * (1.0 + (PI * t).cos()) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Adam state for any number of named parameter sets. Moments are keyed
/// `"{set}/{param}"`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// Number of completed update rounds.
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0, moments: BTreeMap::new() }
    }

    /// Start a new update round; every set updated until the next call
    /// shares its bias correction.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Update `store` in place. Missing gradients count as zero. Weight
    /// decay only touches matrices (rank >= 2).
    pub fn update(
        &mut self,
        set: &str,
        store: &mut ParamStore,
        grads: &HashMap<String, Vec<f32>>,
        lr: f64,
    ) -> Result<()> {
        if self.t == 0 {
            return Err(DamaError::Contract("Adam::update before begin_step".into()));
        }
        let c = self.config;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let decay = (lr * c.weight_decay) as f32;
        let eps = c.eps as f32;
        for (name, p) in store.iter_mut() {
            let key = format!("{set}/{name}");
            let mo = self
                .moments
                .entry(key)
                .or_insert_with(|| Moments { m: vec![0.0; p.data.len()], v: vec![0.0; p.data.len()] });
            if mo.m.len() != p.data.len() {
                return Err(DamaError::Contract(format!("moment size mismatch for {set}/{name}")));
            }
            let g = grads.get(name);
            if let Some(g) = g {
                if g.len() != p.data.len() {
                    return Err(DamaError::Shape(format!("gradient for {name} has {} values", g.len())));
                }
            }
            let decays = p.shape.len() >= 2;
            for i in 0..p.data.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                mo.m[i] = b1 * mo.m[i] + (1.0 - b1) * gi;
                mo.v[i] = b2 * mo.v[i] + (1.0 - b2) * gi * gi;
                if decays {
                    p.data[i] -= decay * p.data[i];
                }
                p.data[i] -= step * mo.m[i] / (mo.v[i].sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}
