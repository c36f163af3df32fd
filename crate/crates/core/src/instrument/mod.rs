//! Training-dynamics diagnostics: hidden-state growth, layer-wise gradients,
//! angular distance, and gamma trajectories.

mod growth;
mod metrics;
mod svg;

pub use growth::{
    growth_shape, GrowthFit, GrowthShape, LINEAR_R2, LINEAR_REL_SLOPE, MIN_GROWTH_POINTS, SUPERLINEAR_LOG_SLOPE,
    SUPERLINEAR_R2_MARGIN,
};
pub use metrics::{MetricRow, MetricsLog};
pub use svg::{LineChart, Series};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelState, TokenBatch};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::TrainHook;

/// Diagnostics for one layer at one step. Gradient and gamma fields are
/// absent when not computed or not applicable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSnapshot {
    pub step: usize,
    pub layer: usize,
    pub hidden_abs_mean: f64,
    pub hidden_variance: f64,
    pub angular_distance: f64,
    pub grad_norm: Option<f64>,
    pub grad_variance: Option<f64>,
    pub gamma_mean: Option<f64>,
    pub gamma_min: Option<f64>,
    pub gamma_max: Option<f64>,
}

/// Mean absolute value and population variance of every entry, in f64.
pub fn pooled_stats<T: Scalar>(data: &[T]) -> (f64, f64) {
    let n = data.len() as f64;
    let (mut abs, mut sum) = (0.0, 0.0);
    for v in data {
        let v = v.to_f64_lossy();
        abs += v.abs();
        sum += v;
    }
    let mean = sum / n;
    let var = data.iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>() / n;
    (abs / n, var)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularDistance {
    /// Mean over usable rows of the angle between them divided by pi.
    pub mean: f64,
    /// Rows where either side had zero norm.
    pub skipped_rows: usize,
}

/// Row-wise angular distance between two `[rows, width]` tensors.
pub fn angular_distance<T: Scalar>(x_in: &Tensor<T>, x_out: &Tensor<T>) -> Result<AngularDistance> {
    if x_in.shape() != x_out.shape() {
        return Err(Error::shape("angular_distance", x_in.shape(), x_out.shape()));
    }
    if x_in.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let width = x_in.last_dim();
    let (mut total, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for (a, b) in x_in.data().chunks(width).zip(x_out.data().chunks(width)) {
        let na = a.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            skipped += 1;
            continue;
        }
        // 2 atan2(|a^ - b^|, |a^ + b^|) is accurate where arccos(cos) is not.
        let (mut diff, mut sum) = (0.0, 0.0);
        for (&p, &q) in a.iter().zip(b) {
            let (p, q) = (p.to_f64_lossy() / na, q.to_f64_lossy() / nb);
            diff += (p - q) * (p - q);
            sum += (p + q) * (p + q);
        }
        total += 2.0 * diff.sqrt().atan2(sum.sqrt()) / std::f64::consts::PI;
        used += 1;
    }
    if used == 0 {
        return Err(Error::AllRowsZero);
    }
    Ok(AngularDistance {
        mean: total / used as f64,
        skipped_rows: skipped,
    })
}

/// Residual-stream statistics after every layer; one forward pass, no gradients.
pub fn hidden_stats<T: Scalar>(model: &ModelState<T>, batch: &TokenBatch, step: usize) -> Result<Vec<LayerSnapshot>> {
    let stream = model.residual_stream(batch)?;
    stream
        .windows(2)
        .enumerate()
        .map(|(layer, pair)| {
            let (abs, var) = pooled_stats(pair[1].data());
            Ok(LayerSnapshot {
                step,
                layer,
                hidden_abs_mean: abs,
                hidden_variance: var,
                angular_distance: angular_distance(&pair[0], &pair[1])?.mean,
                grad_norm: None,
                grad_variance: None,
                gamma_mean: None,
                gamma_min: None,
                gamma_max: None,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerGradStats {
    pub layer: usize,
    pub grad_norm: f64,
    pub grad_variance: f64,
}

/// L2 norm and entry variance of each layer's parameter gradients, read from
/// the gradients already stored on the model.
pub fn layer_grad_stats<T: Scalar>(model: &ModelState<T>) -> Result<Vec<LayerGradStats>> {
    let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); model.config.n_layers];
    for p in &model.params {
        let g = p.value.grad.as_ref().ok_or(Error::MissingGradients)?;
        if let Some(l) = p.layer {
            per_layer[l].extend(g.iter().map(|v| v.to_f64_lossy()));
        }
    }
    Ok(per_layer
        .iter()
        .enumerate()
        .map(|(layer, g)| {
            let (_, var) = pooled_stats(g);
            LayerGradStats {
                layer,
                grad_norm: g.iter().map(|v| v * v).sum::<f64>().sqrt(),
                grad_variance: var,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaStats {
    pub layer: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Mean, min, and max over both output-norm gamma vectors of each layer.
pub fn gamma_trace<T: Scalar>(model: &ModelState<T>) -> Result<Vec<GammaStats>> {
    model
        .output_norms()?
        .into_iter()
        .map(|(layer, attn, mlp)| {
            let values: Vec<f64> = [attn, mlp]
                .iter()
                .flat_map(|s| model.tensor(s.gamma).to_f64_vec())
                .collect();
            Ok(GammaStats {
                layer,
                mean: values.iter().sum::<f64>() / values.len() as f64,
                min: values.iter().copied().fold(f64::INFINITY, f64::min),
                max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
        })
        .collect()
}

/// Every diagnostic for `model` on `batch`. Gradients come from a private
/// copy, so `model` is left untouched.
pub fn snapshot<T: Scalar>(model: &ModelState<T>, batch: &TokenBatch, step: usize) -> Result<Vec<LayerSnapshot>> {
    let mut snaps = hidden_stats(model, batch, step)?;
    let mut probe = model.clone();
    probe.forward_backward(batch)?;
    for (s, g) in snaps.iter_mut().zip(layer_grad_stats(&probe)?) {
        s.grad_norm = Some(g.grad_norm);
        s.grad_variance = Some(g.grad_variance);
    }
    if model.strategy.kind.has_output_norm() {
        for (s, g) in snaps.iter_mut().zip(gamma_trace(model)?) {
            s.gamma_mean = Some(g.mean);
            s.gamma_min = Some(g.min);
            s.gamma_max = Some(g.max);
        }
    }
    Ok(snaps)
}

/// Training hook that records [`snapshot`]s on a fixed probe batch at chosen steps.
pub struct SnapshotHook {
    pub probe: TokenBatch,
    pub steps: BTreeSet<usize>,
    pub snapshots: Vec<LayerSnapshot>,
}

impl SnapshotHook {
    pub fn new(probe: TokenBatch, steps: impl IntoIterator<Item = usize>) -> Self {
        Self {
            probe,
            steps: steps.into_iter().collect(),
            snapshots: Vec::new(),
        }
    }

    /// Snapshots of the latest recorded step.
    pub fn last(&self) -> Vec<LayerSnapshot> {
        let Some(step) = self.snapshots.last().map(|s| s.step) else {
            return Vec::new();
        };
        self.snapshots.iter().filter(|s| s.step == step).copied().collect()
    }
}

impl<T: Scalar> TrainHook<T> for SnapshotHook {
    fn on_step(&mut self, step: usize, model: &ModelState<T>) -> Result<()> {
        if self.steps.contains(&step) {
            self.snapshots.extend(snapshot(model, &self.probe, step)?);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_parameters, PlacementStrategy, TransformerConfig};

    fn batch() -> TokenBatch {
        let w: Vec<Vec<usize>> = (0..2)
            .map(|b| (0..9).map(|i| (i * 31 + b * 7) % 256).collect())
            .collect();
        TokenBatch::from_windows(&w).unwrap()
    }

    #[test]
    fn angular_reference_cases() {
        let x = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[-3.0, 0.5]]).unwrap();
        let neg = Tensor::<f64>::from_rows(&[&[-1.0, -2.0], &[3.0, -0.5]]).unwrap();
        let orth = Tensor::<f64>::from_rows(&[&[-2.0, 1.0], &[0.5, 3.0]]).unwrap();
        assert_eq!(angular_distance(&x, &x).unwrap().mean, 0.0);
        assert_eq!(angular_distance(&x, &neg).unwrap().mean, 1.0);
        assert!((angular_distance(&x, &orth).unwrap().mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn angular_skips_zero_rows() {
        let a = Tensor::<f64>::from_rows(&[&[0.0, 0.0], &[1.0, 0.0]]).unwrap();
        let b = Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]).unwrap();
        let d = angular_distance(&a, &b).unwrap();
        assert_eq!(d.skipped_rows, 1);
        assert_eq!(d.mean, 0.0);
        let z = Tensor::<f64>::zeros(vec![2, 2]);
        assert!(matches!(angular_distance(&z, &b), Err(Error::AllRowsZero)));
    }

    #[test]
    fn snapshot_leaves_model_untouched() {
        let m = init_parameters::<f64>(&TransformerConfig::tiny(), &PlacementStrategy::peri_ln(), 0).unwrap();
        let before = m.clone();
        let s = snapshot(&m, &batch(), 0).unwrap();
        assert_eq!(m, before);
        assert_eq!(s.len(), 2);
        assert!(s
            .iter()
            .all(|x| x.gamma_mean == Some(1.0) && x.grad_norm.unwrap() > 0.0));
    }

    #[test]
    fn grad_stats_need_gradients() {
        let m = init_parameters::<f64>(&TransformerConfig::tiny(), &PlacementStrategy::pre_ln(), 0).unwrap();
        assert!(matches!(layer_grad_stats(&m), Err(Error::MissingGradients)));
        assert!(matches!(gamma_trace(&m), Err(Error::NoOutputNorm(_))));
    }

    #[test]
    fn post_ln_variance_is_bounded_by_one() {
        let m = init_parameters::<f64>(&TransformerConfig::tiny(), &PlacementStrategy::post_ln(), 3).unwrap();
        for s in hidden_stats(&m, &batch(), 0).unwrap() {
            assert!(s.hidden_variance <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn zeroed_model_has_zero_hidden_state() {
        let mut m = init_parameters::<f64>(&TransformerConfig::tiny(), &PlacementStrategy::pre_ln(), 3).unwrap();
        for p in &mut m.params {
            if p.role != crate::model::ParamRole::Gamma {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let stream = m.residual_stream(&batch()).unwrap();
        assert!(stream.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }
}
