use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::model::{PlacementStrategy, TransformerConfig};

/// Trailing window for spike detection and the final-loss average.
pub const SPIKE_WINDOW: usize = 50;
/// A step is a spike when its grad norm exceeds this multiple of the trailing median.
pub const SPIKE_FACTOR: f64 = 3.0;
pub const FINAL_LOSS_WINDOW: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: PlacementStrategy,
    pub model: TransformerConfig,
    pub train: TrainConfig,
    pub precision: String,
    pub steps: Vec<StepRecord>,
    pub diverged: bool,
    pub diverged_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: String,
    pub seed: u64,
    pub peak_lr: f64,
    pub steps_run: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub spikes: usize,
    pub diverged: bool,
    pub diverged_at: Option<usize>,
}

impl RunRecord {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.train_loss).collect()
    }

    pub fn grad_norms(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.grad_norm).collect()
    }

    /// Mean training loss over the last [`FINAL_LOSS_WINDOW`] steps; `None`
    /// for a diverged or empty run.
    pub fn final_loss(&self) -> Option<f64> {
        if self.diverged || self.steps.is_empty() {
            return None;
        }
        let n = self.steps.len().min(FINAL_LOSS_WINDOW);
        let tail = &self.steps[self.steps.len() - n..];
        Some(tail.iter().map(|s| s.train_loss).sum::<f64>() / n as f64)
    }

    pub fn spike_count(&self) -> usize {
        count_spikes(&self.grad_norms(), SPIKE_WINDOW, SPIKE_FACTOR)
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            strategy: self.strategy.label(),
            seed: self.train.seed,
            peak_lr: self.train.peak_lr,
            steps_run: self.steps.len(),
            initial_loss: self.steps.first().map(|s| s.train_loss),
            final_loss: self.final_loss(),
            spikes: self.spike_count(),
            diverged: self.diverged,
            diverged_at: self.diverged_at,
        }
    }

    /// `step,lr,loss,grad_norm`, one row per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss,grad_norm\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{},{}\n", s.step, s.lr, s.train_loss, s.grad_norm));
        }
        out
    }

    /// Config echo plus summary, without the per-step trace.
    pub fn sidecar_json(&self) -> serde_json::Value {
        serde_json::json!({
            "strategy": self.strategy,
            "model": self.model,
            "train": self.train,
            "precision": self.precision,
            "summary": self.summary(),
        })
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Steps whose value exceeds `factor` times the median of the preceding
/// `window` values. The first `window` steps are never counted.
pub fn count_spikes(norms: &[f64], window: usize, factor: f64) -> usize {
    if window == 0 {
        return 0;
    }
    let mut buf = Vec::with_capacity(window);
    (window..norms.len())
        .filter(|&i| {
            buf.clear();
            buf.extend_from_slice(&norms[i - window..i]);
            norms[i] > factor * median(&mut buf)
        })
        .count()
}
