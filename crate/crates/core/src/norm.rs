//! RMSNorm and LayerNorm: layer parameters, row kernels, and the analytic
//! RMSNorm Jacobian with its norm bound.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    RmsNorm,
    LayerNorm,
}

/// Scale (and, for LayerNorm, shift) parameters of one normalization site.
#[derive(Debug, Clone, PartialEq)]
pub struct NormLayer<T> {
    pub kind: NormKind,
    pub gamma: Tensor<T>,
    pub beta: Option<Tensor<T>>,
    pub epsilon: f64,
    pub frozen_gamma: bool,
}

impl<T: Scalar> NormLayer<T> {
    /// Fresh layer: gamma = 1, beta = 0 (LayerNorm only).
    pub fn new(kind: NormKind, dim: usize, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(Self {
            kind,
            gamma: Tensor::full(vec![dim], T::one()),
            beta: (kind == NormKind::LayerNorm).then(|| Tensor::zeros(vec![dim])),
            epsilon,
            frozen_gamma: false,
        })
    }

    pub fn frozen(mut self, frozen: bool) -> Self {
        self.frozen_gamma = frozen;
        self
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Number of learnable entries this layer contributes (gamma plus beta).
    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.as_ref().map_or(0, Tensor::len)
    }

    /// Registers the parameters on `tape` and records the normalization of `x`.
    ///
    /// A frozen gamma enters the tape as a constant, so it never collects a
    /// gradient.
    pub fn record(&self, tape: &mut Tape<T>, x: Var) -> Result<NormVars> {
        let gamma = if self.frozen_gamma {
            tape.constant(self.gamma.clone())
        } else {
            tape.param(self.gamma.clone())
        };
        let beta = self.beta.as_ref().map(|b| tape.param(b.clone()));
        let out = self.apply_with(tape, x, gamma, beta)?;
        Ok(NormVars { out, gamma, beta })
    }

    /// Records the normalization using gamma/beta vars already on the tape.
    pub fn apply_with(&self, tape: &mut Tape<T>, x: Var, gamma: Var, beta: Option<Var>) -> Result<Var> {
        match self.kind {
            NormKind::RmsNorm => tape.rmsnorm(x, gamma, self.epsilon),
            NormKind::LayerNorm => tape.layernorm(x, gamma, beta, self.epsilon),
        }
    }
}

/// Handles produced by [`NormLayer::record`].
#[derive(Debug, Clone, Copy)]
pub struct NormVars {
    pub out: Var,
    pub gamma: Var,
    pub beta: Option<Var>,
}

fn check_dim<T: Scalar>(op: &'static str, a: &Tensor<T>, layer: &NormLayer<T>) -> Result<()> {
    if a.last_dim() != layer.dim() {
        return Err(Error::shape(op, a.shape(), layer.gamma.shape()));
    }
    Ok(())
}

/// `gamma * a / sqrt(mean(a^2) + eps)` per row.
///
/// Uses the layer's epsilon as given, so `epsilon = 0` is allowed here for
/// exact algebraic checks even though [`NormLayer::new`] rejects it.
pub fn rmsnorm<T: Scalar>(a: &Tensor<T>, layer: &NormLayer<T>) -> Result<Tensor<T>> {
    check_dim("rmsnorm", a, layer)?;
    let mut out = vec![T::zero(); a.len()];
    let mut inv = vec![T::zero(); a.rows()];
    kernel::rmsnorm_forward(
        a.data(),
        layer.gamma.data(),
        T::from_f64_lossy(layer.epsilon),
        &mut out,
        &mut inv,
    );
    Tensor::new(a.shape().to_vec(), out)
}

/// `(a - mean) / sqrt(var + eps) * gamma + beta` per row.
pub fn layernorm<T: Scalar>(a: &Tensor<T>, layer: &NormLayer<T>) -> Result<Tensor<T>> {
    check_dim("layernorm", a, layer)?;
    let rows = a.rows();
    let mut out = vec![T::zero(); a.len()];
    let (mut mean, mut inv) = (vec![T::zero(); rows], vec![T::zero(); rows]);
    kernel::layernorm_forward(
        a.data(),
        layer.gamma.data(),
        layer.beta.as_ref().map(Tensor::data),
        T::from_f64_lossy(layer.epsilon),
        &mut out,
        &mut mean,
        &mut inv,
    );
    Tensor::new(a.shape().to_vec(), out)
}

/// Closed-form Jacobian of scalar-gamma RMSNorm at `a`:
/// `gamma/sqrt(alpha+eps) I - gamma/(D (alpha+eps)^{3/2}) a a^T`, with
/// `alpha = mean(a^2)`. Returned row-major, `D x D`.
pub fn rmsnorm_jacobian(a: &[f64], gamma: f64, epsilon: f64) -> Vec<f64> {
    let d = a.len();
    let alpha = a.iter().map(|v| v * v).sum::<f64>() / d as f64;
    let diag = gamma / (alpha + epsilon).sqrt();
    let outer = gamma / (d as f64 * (alpha + epsilon).powf(1.5));
    let mut j = vec![0.0; d * d];
    for p in 0..d {
        for q in 0..d {
            let id = if p == q { diag } else { 0.0 };
            j[p * d + q] = id - outer * a[p] * a[q];
        }
    }
    j
}

/// `2 gamma sqrt(D) / ||a||`: upper bound on the spectral norm of the RMSNorm Jacobian.
pub fn jacobian_norm_bound(a: &[f64], gamma: f64) -> Result<f64> {
    let norm = l2(a);
    if norm == 0.0 {
        return Err(Error::UndefinedBound("RMSNorm Jacobian bound at a = 0"));
    }
    Ok(2.0 * gamma.abs() * (a.len() as f64).sqrt() / norm)
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest singular value of a row-major `rows x cols` matrix, by power
/// iteration on `M^T M`.
pub fn spectral_norm(m: &[f64], rows: usize, cols: usize) -> f64 {
    assert_eq!(m.len(), rows * cols);
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    // deterministic, non-degenerate start
    let mut v: Vec<f64> = (0..cols).map(|i| 1.0 + 0.1 * ((i * 7919) % 13) as f64).collect();
    let mut sigma = 0.0;
    for _ in 0..500 {
        let n = l2(&v);
        if n == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= n);
        let mv: Vec<f64> = (0..rows)
            .map(|r| (0..cols).map(|c| m[r * cols + c] * v[c]).sum())
            .collect();
        let next_sigma = l2(&mv);
        let mut w = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                w[c] += m[r * cols + c] * mv[r];
            }
        }
        v = w;
        if (next_sigma - sigma).abs() <= 1e-14 * next_sigma.max(1e-300) {
            return next_sigma;
        }
        sigma = next_sigma;
    }
    sigma
}

pub(crate) mod kernel {
    use crate::scalar::Scalar;

    pub(crate) fn rmsnorm_forward<T: Scalar>(x: &[T], gamma: &[T], eps: T, out: &mut [T], inv_rms: &mut [T]) {
        let d = gamma.len();
        let dt = T::from_usize(d).unwrap();
        for ((row, orow), r) in x.chunks(d).zip(out.chunks_mut(d)).zip(inv_rms.iter_mut()) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / dt;
            *r = T::one() / (ms + eps).sqrt();
            for ((o, &v), &g) in orow.iter_mut().zip(row).zip(gamma) {
                *o = g * v * *r;
            }
        }
    }

    pub(crate) fn rmsnorm_backward<T: Scalar>(
        x: &[T],
        gamma: &[T],
        inv_rms: &[T],
        g: &[T],
        mut dx: Option<&mut [T]>,
        mut dgamma: Option<&mut [T]>,
    ) {
        let d = gamma.len();
        let dt = T::from_usize(d).unwrap();
        for (i, ((row, grow), &r)) in x.chunks(d).zip(g.chunks(d)).zip(inv_rms).enumerate() {
            if let Some(dg) = dgamma.as_deref_mut() {
                for ((dg, &v), &gy) in dg.iter_mut().zip(row).zip(grow) {
                    *dg += gy * v * r;
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dot: T = row.iter().zip(grow).zip(gamma).map(|((&v, &gy), &w)| w * gy * v).sum();
                let c = r * r * r * dot / dt;
                for (((o, &v), &gy), &w) in dx[i * d..(i + 1) * d].iter_mut().zip(row).zip(grow).zip(gamma) {
                    *o += r * w * gy - c * v;
                }
            }
        }
    }

    pub(crate) fn layernorm_forward<T: Scalar>(
        x: &[T],
        gamma: &[T],
        beta: Option<&[T]>,
        eps: T,
        out: &mut [T],
        mean: &mut [T],
        inv_std: &mut [T],
    ) {
        let d = gamma.len();
        let dt = T::from_usize(d).unwrap();
        for (i, (row, orow)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let mu = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dt;
            let r = T::one() / (var + eps).sqrt();
            mean[i] = mu;
            inv_std[i] = r;
            for (j, (o, &v)) in orow.iter_mut().zip(row).enumerate() {
                let shift = beta.map_or(T::zero(), |b| b[j]);
                *o = (v - mu) * r * gamma[j] + shift;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn layernorm_backward<T: Scalar>(
        x: &[T],
        gamma: &[T],
        mean: &[T],
        inv_std: &[T],
        g: &[T],
        mut dx: Option<&mut [T]>,
        mut dgamma: Option<&mut [T]>,
        mut dbeta: Option<&mut [T]>,
    ) {
        let d = gamma.len();
        let dt = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); d];
        let mut gxhat = vec![T::zero(); d];
        for (i, (row, grow)) in x.chunks(d).zip(g.chunks(d)).enumerate() {
            let (mu, r) = (mean[i], inv_std[i]);
            for j in 0..d {
                xhat[j] = (row[j] - mu) * r;
                gxhat[j] = grow[j] * gamma[j];
            }
            if let Some(db) = dbeta.as_deref_mut() {
                db.iter_mut().zip(grow).for_each(|(b, &gy)| *b += gy);
            }
            if let Some(dg) = dgamma.as_deref_mut() {
                for ((dg, &gy), &xh) in dg.iter_mut().zip(grow).zip(&xhat) {
                    *dg += gy * xh;
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                let m1 = gxhat.iter().copied().sum::<T>() / dt;
                let m2 = gxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / dt;
                for (j, o) in dx[i * d..(i + 1) * d].iter_mut().enumerate() {
                    *o += r * (gxhat[j] - m1 - xhat[j] * m2);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(kind: NormKind, gamma: &[f64], eps: f64) -> NormLayer<f64> {
        let mut l = NormLayer::new(kind, gamma.len(), 1.0).unwrap();
        l.gamma = Tensor::from_f64(vec![gamma.len()], gamma).unwrap();
        l.epsilon = eps;
        l
    }

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(vec![1, v.len()], v).unwrap()
    }

    #[test]
    fn constant_row_normalizes_to_ones() {
        let y = rmsnorm(&t(&[2.0; 4]), &layer(NormKind::RmsNorm, &[1.0; 4], 0.0)).unwrap();
        assert_eq!(y.data(), &[1.0; 4]);
    }

    #[test]
    fn rms_three_scaled_by_two() {
        let y = rmsnorm(&t(&[3.0, -3.0]), &layer(NormKind::RmsNorm, &[2.0, 2.0], 0.0)).unwrap();
        assert_eq!(y.data(), &[2.0, -2.0]);
    }

    #[test]
    fn layernorm_hand_cases() {
        let y = layernorm(&t(&[1.0, 3.0]), &layer(NormKind::LayerNorm, &[1.0, 1.0], 0.0)).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
        let mut l = layer(NormKind::LayerNorm, &[1.0; 3], 1e-6);
        l.beta = Some(Tensor::from_f64(vec![3], &[0.5, -1.0, 2.0]).unwrap());
        let y = layernorm(&t(&[4.0; 3]), &l).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let l = layer(NormKind::RmsNorm, &[1.0; 3], 1e-6);
        assert!(matches!(rmsnorm(&t(&[1.0; 4]), &l), Err(Error::Shape { .. })));
        let l = layer(NormKind::LayerNorm, &[1.0; 3], 1e-6);
        assert!(matches!(layernorm(&t(&[1.0; 4]), &l), Err(Error::Shape { .. })));
    }

    #[test]
    fn new_layer_defaults() {
        let l = NormLayer::<f64>::new(NormKind::LayerNorm, 5, DEFAULT_EPSILON).unwrap();
        assert!(l.gamma.data().iter().all(|&g| g == 1.0));
        assert!(l.beta.as_ref().unwrap().data().iter().all(|&b| b == 0.0));
        assert_eq!(l.param_count(), 10);
        assert!(NormLayer::<f64>::new(NormKind::RmsNorm, 5, 0.0).is_err());
        assert!(NormLayer::<f64>::new(NormKind::RmsNorm, 5, DEFAULT_EPSILON)
            .unwrap()
            .beta
            .is_none());
    }

    #[test]
    fn jacobian_hand_case() {
        let j = rmsnorm_jacobian(&[1.0, 0.0], 1.0, 0.0);
        let r2 = 2f64.sqrt();
        let want = [0.0, 0.0, 0.0, r2];
        for (a, b) in j.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{j:?}");
        }
        assert!((spectral_norm(&j, 2, 2) - r2).abs() < 1e-12);
        let bound = jacobian_norm_bound(&[1.0, 0.0], 1.0).unwrap();
        assert!((bound - 2.0 * r2).abs() < 1e-12);
    }

    #[test]
    fn jacobian_vanishes_with_gamma() {
        assert!(rmsnorm_jacobian(&[0.3, -1.2, 2.0], 0.0, 1e-6).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bound_is_homogeneous_and_undefined_at_zero() {
        let a = [0.5, -1.0, 2.0];
        let b1 = jacobian_norm_bound(&a, 1.5).unwrap();
        let scaled: Vec<f64> = a.iter().map(|v| v * 10.0).collect();
        let b10 = jacobian_norm_bound(&scaled, 1.5).unwrap();
        assert!((b10 - b1 / 10.0).abs() < 1e-14);
        assert!(matches!(
            jacobian_norm_bound(&[0.0; 3], 1.0),
            Err(Error::UndefinedBound(_))
        ));
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let m = [3.0, 0.0, 0.0, 0.0, -5.0, 0.0];
        assert!((spectral_norm(&m, 2, 3) - 5.0).abs() < 1e-12);
    }
}
