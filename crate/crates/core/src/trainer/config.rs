use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    #[serde(default = "defaults::warmup_fraction")]
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::beta1")]
    pub adam_beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub adam_beta2: f64,
    #[serde(default = "defaults::eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
    /// Global L2 clip on the gradient; off unless set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

mod defaults {
    pub fn warmup_fraction() -> f64 {
        0.1
    }
    pub fn weight_decay() -> f64 {
        0.033
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.95
    }
    pub fn eps() -> f64 {
        1e-8
    }
}

impl TrainConfig {
    /// Batch 16 of 256 tokens for 2000 steps.
    pub fn desk(peak_lr: f64) -> Self {
        Self {
            peak_lr,
            warmup_fraction: defaults::warmup_fraction(),
            total_steps: 2000,
            batch_size: 16,
            seq_len: 256,
            weight_decay: defaults::weight_decay(),
            adam_beta1: defaults::beta1(),
            adam_beta2: defaults::beta2(),
            adam_eps: defaults::eps(),
            seed: 0,
            grad_clip: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_steps(mut self, total_steps: usize) -> Self {
        self.total_steps = total_steps;
        self
    }

    pub fn with_lr(mut self, peak_lr: f64) -> Self {
        self.peak_lr = peak_lr;
        self
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.peak_lr >= 0.0) || !self.peak_lr.is_finite() {
            return fail(format!(
                "peak_lr must be a finite non-negative number, got {}",
                self.peak_lr
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail(format!(
                "warmup_fraction must be in [0, 1), got {}",
                self.warmup_fraction
            ));
        }
        if self.total_steps == 0 {
            return fail("total_steps must be at least 1".into());
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return fail("batch_size and seq_len must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must be in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Learning rate for the update at `step`: a linear ramp from 0 to the peak
/// over the warmup, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: usize, config: &TrainConfig) -> Result<f64> {
    let total = config.total_steps;
    if step > total {
        return Err(Error::StepOutOfRange { step, total });
    }
    let warmup = config.warmup_steps().min(total);
    let peak = config.peak_lr;
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let decay = total - warmup;
    if decay == 0 {
        return Ok(peak);
    }
    let progress = (step - warmup) as f64 / decay as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
