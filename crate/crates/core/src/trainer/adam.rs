use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::scalar::Scalar;

/// Adam moments for every parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(model: &ModelState<T>) -> Self {
        let zeros: Vec<Vec<T>> = model.params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// L2 norm over every parameter gradient.
pub fn global_grad_norm<T: Scalar>(model: &ModelState<T>) -> Result<f64> {
    let mut sum = 0.0;
    for p in &model.params {
        let g = p.value.grad.as_ref().ok_or(Error::MissingGradients)?;
        sum += g.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>();
    }
    Ok(sum.sqrt())
}

/// One bias-corrected Adam update with decoupled weight decay `lr * wd * theta`.
///
/// Frozen parameters are skipped; gamma, beta, and biases are never decayed.
/// `grad_scale` multiplies every gradient first (used for clipping).
pub fn adam_step<T: Scalar>(
    state: &mut AdamState<T>,
    model: &mut ModelState<T>,
    lr: f64,
    config: &TrainConfig,
    grad_scale: f64,
) -> Result<()> {
    if state.m.len() != model.params.len() {
        return Err(Error::shape("adam", &[state.m.len()], &[model.params.len()]));
    }
    for (i, p) in model.params.iter().enumerate() {
        if state.m[i].len() != p.value.len() || state.v[i].len() != p.value.len() {
            return Err(Error::shape("adam", &[state.m[i].len()], p.value.shape()));
        }
        match &p.value.grad {
            Some(g) if g.len() == p.value.len() => {}
            Some(g) => return Err(Error::shape("adam gradient", &[g.len()], p.value.shape())),
            None => return Err(Error::MissingGradients),
        }
    }
    state.t += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    let c = |x: f64| T::from_f64_lossy(x);
    let (b1t, b2t, one_b1, one_b2, scale) = (c(b1), c(b2), c(1.0 - b1), c(1.0 - b2), c(grad_scale));
    let step = c(lr / bc1);
    let inv_bc2 = c(1.0 / bc2);
    let eps = c(config.adam_eps);
    for (i, p) in model.params.iter_mut().enumerate() {
        if p.frozen {
            continue;
        }
        let decay = if p.role.skips_decay() {
            T::one()
        } else {
            c(1.0 - lr * config.weight_decay)
        };
        let grad = p.value.grad.take().unwrap();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad[j] * scale;
            m[j] = b1t * m[j] + one_b1 * g;
            v[j] = b2t * v[j] + one_b2 * g * g;
            *w = *w * decay - step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
        }
        p.value.grad = Some(grad);
    }
    Ok(())
}
