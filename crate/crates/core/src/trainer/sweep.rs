use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{no_hook, train, Corpus, RunRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::instrument::{LayerSnapshot, SnapshotHook};
use crate::model::{init_parameters, PlacementStrategy, TokenBatch, TransformerConfig};
use crate::scalar::Scalar;

/// One (strategy, lr, seed) run of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub strategy: PlacementStrategy,
    pub lr: f64,
    pub seed: u64,
    pub final_loss: Option<f64>,
    pub diverged: bool,
    pub spikes: usize,
    /// Set when the cell failed outright; the rest of the sweep still runs.
    pub error: Option<String>,
    /// Diagnostics of the trained model on the sweep's probe batch, if any.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub final_layers: Vec<LayerSnapshot>,
    #[serde(skip)]
    pub record: Option<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
}

/// Trains every (strategy, lr, seed) combination, in parallel. The seed
/// drives both initialization and data order. With a `probe`, each cell
/// also keeps per-layer diagnostics of its final model.
pub fn lr_sweep<T: Scalar>(
    model: &TransformerConfig,
    strategies: &[PlacementStrategy],
    lrs: &[f64],
    base: &TrainConfig,
    seeds: &[u64],
    corpus: &Corpus,
    probe: Option<&TokenBatch>,
) -> Result<SweepTable> {
    if strategies.is_empty() || lrs.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep grid is empty".into()));
    }
    let grid: Vec<(PlacementStrategy, f64, u64)> = strategies
        .iter()
        .flat_map(|&s| {
            lrs.iter()
                .flat_map(move |&lr| seeds.iter().map(move |&seed| (s, lr, seed)))
        })
        .collect();
    let cells = grid
        .into_par_iter()
        .map(|(strategy, lr, seed)| {
            let cfg = base.with_lr(lr).with_seed(seed);
            let mut final_layers = Vec::new();
            let run = init_parameters::<T>(model, &strategy, seed).and_then(|mut m| match probe {
                Some(p) => {
                    let mut hook = SnapshotHook::new(p.clone(), [cfg.total_steps]);
                    let r = train(&mut m, corpus, &cfg, &mut hook);
                    final_layers = hook.snapshots;
                    r
                }
                None => train(&mut m, corpus, &cfg, &mut no_hook::<T>),
            });
            match run {
                Ok(r) => SweepCell {
                    strategy,
                    lr,
                    seed,
                    final_loss: r.final_loss(),
                    diverged: r.diverged,
                    spikes: r.spike_count(),
                    error: None,
                    final_layers,
                    record: Some(r),
                },
                Err(e) => SweepCell {
                    strategy,
                    lr,
                    seed,
                    final_loss: None,
                    diverged: false,
                    spikes: 0,
                    error: Some(e.to_string()),
                    final_layers: Vec::new(),
                    record: None,
                },
            }
        })
        .collect();
    Ok(SweepTable { cells })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl SweepTable {
    pub fn lrs(&self) -> Vec<f64> {
        let mut lrs: Vec<f64> = Vec::new();
        for c in &self.cells {
            if !lrs.contains(&c.lr) {
                lrs.push(c.lr);
            }
        }
        lrs
    }

    pub fn strategies(&self) -> Vec<PlacementStrategy> {
        let mut out: Vec<PlacementStrategy> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.strategy) {
                out.push(c.strategy);
            }
        }
        out
    }

    pub fn cells_for<'a>(&'a self, strategy: &'a PlacementStrategy, lr: f64) -> impl Iterator<Item = &'a SweepCell> {
        self.cells.iter().filter(move |c| c.strategy == *strategy && c.lr == lr)
    }

    /// Median final loss over seeds; `None` if any seed diverged or failed.
    pub fn median_loss(&self, strategy: &PlacementStrategy, lr: f64) -> Option<f64> {
        let losses: Option<Vec<f64>> = self.cells_for(strategy, lr).map(|c| c.final_loss).collect();
        losses.filter(|l| !l.is_empty()).map(median)
    }

    /// Learning rate with the lowest median final loss for `strategy`.
    pub fn best_lr(&self, strategy: &PlacementStrategy) -> Option<(f64, f64)> {
        self.lrs()
            .into_iter()
            .filter_map(|lr| self.median_loss(strategy, lr).map(|l| (lr, l)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Learning rate minimizing the summed median loss of all `strategies`,
    /// among rates where none of them diverged.
    pub fn shared_best_lr(&self, strategies: &[PlacementStrategy]) -> Option<f64> {
        self.lrs()
            .into_iter()
            .filter_map(|lr| {
                let total: Option<f64> = strategies.iter().map(|s| self.median_loss(s, lr)).sum();
                total.map(|t| (lr, t))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(lr, _)| lr)
    }

    /// `strategy,lr,seed,final_loss,diverged,spikes,error`; failed or diverged
    /// cells have an empty loss.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,lr,seed,final_loss,diverged,spikes,error\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.strategy.label(),
                c.lr,
                c.seed,
                c.final_loss.map(|l| l.to_string()).unwrap_or_default(),
                c.diverged,
                c.spikes,
                c.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
            ));
        }
        out
    }

    /// Per (strategy, lr): median final loss and a `*` on each strategy's best cell.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("strategy,lr,median_final_loss,diverged_seeds,best\n");
        for s in self.strategies() {
            let best = self.best_lr(&s).map(|b| b.0);
            for lr in self.lrs() {
                let diverged = self.cells_for(&s, lr).filter(|c| c.diverged).count();
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    s.label(),
                    lr,
                    self.median_loss(&s, lr).map(|l| l.to_string()).unwrap_or_default(),
                    diverged,
                    if best == Some(lr) { "*" } else { "" }
                ));
            }
        }
        out
    }
}
