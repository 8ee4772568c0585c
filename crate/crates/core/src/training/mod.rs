//! Optimization, evaluation and sampling.
//!
//! Training uses Adam with decoupled weight decay, global-norm gradient
//! clipping and a learning rate that warms up linearly and then follows a
//! half cosine down to zero.

mod eval;
mod optim;
mod trainer;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use eval::{
    evaluate, evaluate_min_context, sample, scored_positions, EvalReport, SampleOptions,
};
pub use optim::{adam_step, clip_gradients, global_norm, OptState};
pub use trainer::{
    load_checkpoint, train, Checkpoint, CheckpointHeader, StepMetrics, Trainer, TrainerState,
    WindowSampler,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Sequences per step.
    pub batch_size: usize,
    pub seed: u64,
    /// Omit wall-clock times so that repeated runs produce identical logs.
    pub deterministic: bool,
    /// Steps between checkpoint writes; 0 writes only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 0.00035,
            warmup_steps: 5000,
            total_steps: 100_000,
            clip_norm: 1.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            seed: 0,
            deterministic: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if !(self.peak_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate and weight decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        // stored as a signed integer in checkpoint headers
        if i64::try_from(self.seed).is_err() {
            return bad(format!("seed {} exceeds {}", self.seed, i64::MAX));
        }
        Ok(())
    }
}

/// Learning rate at `step`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let (warm, total) = (cfg.warmup_steps, cfg.total_steps);
    if step <= warm {
        if warm == 0 {
            return cfg.peak_lr;
        }
        return cfg.peak_lr * step as f64 / warm as f64;
    }
    let progress = ((step - warm) as f64 / (total - warm) as f64).min(1.0);
    (cfg.peak_lr * 0.5 * (1.0 + (PI * progress).cos())).max(0.0)
}
