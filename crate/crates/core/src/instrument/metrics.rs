use serde::{Deserialize, Serialize};

use super::LayerSnapshot;

/// One long-format metric sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub layer: usize,
    pub metric: String,
    pub value: f64,
}

/// Append-only store of per-layer metrics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn push(&mut self, step: usize, layer: usize, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            step,
            layer,
            metric: metric.to_string(),
            value,
        });
    }

    pub fn extend_snapshots(&mut self, snaps: &[LayerSnapshot]) {
        for s in snaps {
            let fields = [
                ("hidden_abs_mean", Some(s.hidden_abs_mean)),
                ("hidden_variance", Some(s.hidden_variance)),
                ("angular_distance", Some(s.angular_distance)),
                ("grad_norm", s.grad_norm),
                ("grad_variance", s.grad_variance),
                ("gamma_mean", s.gamma_mean),
                ("gamma_min", s.gamma_min),
                ("gamma_max", s.gamma_max),
            ];
            for (name, v) in fields {
                if let Some(v) = v {
                    self.push(s.step, s.layer, name, v);
                }
            }
        }
    }

    pub fn from_snapshots(snaps: &[LayerSnapshot]) -> Self {
        let mut log = Self::default();
        log.extend_snapshots(snaps);
        log
    }

    /// Values of `metric` at `step`, ordered by layer.
    pub fn series(&self, step: usize, metric: &str) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = self
            .rows
            .iter()
            .filter(|r| r.step == step && r.metric == metric)
            .map(|r| (r.layer, r.value))
            .collect();
        v.sort_by_key(|p| p.0);
        v
    }

    pub fn steps(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.rows.iter().map(|r| r.step).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// `step,layer,metric,value`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,layer,metric,value\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.layer, r.metric, r.value));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.rows).expect("metric rows serialize")
    }
}
