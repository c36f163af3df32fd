//! Central finite differences: the reference every autodiff rule is checked against.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Below this magnitude an oracle entry is compared absolutely.
pub const FD_ABS_FLOOR: f64 = 1e-8;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn fd_gradient<T, F>(mut f: F, x: &Tensor<T>, step: f64) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let h = T::from_f64_lossy(step);
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push(T::from_f64_lossy((up - down) / (2.0 * step)));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Largest per-entry error between an analytic gradient and its oracle.
///
/// Entries whose oracle magnitude is at least [`FD_ABS_FLOOR`] are compared
/// relatively; smaller ones absolutely.
pub fn max_relative_error(analytic: &[f64], oracle: &[f64]) -> f64 {
    assert_eq!(analytic.len(), oracle.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(oracle)
        .map(|(&a, &o)| {
            let diff = (a - o).abs();
            if o.abs() >= FD_ABS_FLOOR {
                diff / o.abs()
            } else {
                diff
            }
        })
        .fold(0.0, f64::max)
}

/// Largest entry error relative to the largest oracle entry:
/// `max |a - o| / max(max |o|, FD_ABS_FLOOR)`.
///
/// Unlike [`max_relative_error`], entries that are tiny compared with the
/// rest of the gradient cannot dominate through finite-difference round-off.
pub fn relative_error(analytic: &[f64], oracle: &[f64]) -> f64 {
    assert_eq!(analytic.len(), oracle.len(), "gradient lengths differ");
    let scale = oracle.iter().fold(FD_ABS_FLOOR, |m, o| m.max(o.abs()));
    analytic
        .iter()
        .zip(oracle)
        .fold(0.0f64, |m, (a, o)| m.max((a - o).abs()))
        / scale
}
