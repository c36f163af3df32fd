//! Numerical checks of the MLP-block gradient results: the exact Pre-LN
//! gradient of the output projection, and the entrywise gradient bounds for
//! Peri-LN (`4 gamma sqrt(D) |h| / |a|`) and Post-LN (`4 gamma sqrt(D) |h| / |x + a|`).
//!
//! Everything here is `f64` and uses a scalar gamma.

mod report;

pub use report::{proposition_report, CaseRecord, PropositionReport, ReportOptions, ScaleRow};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{fd_gradient, relative_error, Tape, Var};
use crate::error::{Error, Result};
use crate::norm::{jacobian_norm_bound, l2, rmsnorm_jacobian, spectral_norm};
use crate::tensor::Tensor;

/// Forward epsilon used by every block.
pub const THEORY_EPSILON: f64 = 1e-8;
/// Autodiff and the closed form must agree to this, absolutely.
pub const IDENTITY_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    /// `o = x + MLP(RMSNorm(x))`
    PreLn,
    /// `o = x + RMSNorm(MLP(RMSNorm(x)))`
    PeriLn,
    /// `o = RMSNorm(x + MLP(x))`
    PostLn,
}

impl Block {
    pub const ALL: [Block; 3] = [Block::PreLn, Block::PeriLn, Block::PostLn];

    pub fn label(self) -> &'static str {
        match self {
            Self::PreLn => "pre_ln",
            Self::PeriLn => "peri_ln",
            Self::PostLn => "post_ln",
        }
    }
}

/// One-token MLP block `a = ReLU(x~ W1 + b1) W2 + b2` with a one-hot label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryCase {
    pub x: Vec<f64>,
    /// `D x H`, row-major, before `scale_injection`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `H x D`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub gamma: f64,
    pub epsilon: f64,
    pub label: usize,
    /// Multiplies `W1` in the forward pass to provoke large `h`.
    pub scale_injection: f64,
}

fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

impl TheoryCase {
    /// Gaussian inputs and weights with variance-preserving scales; gamma in
    /// `[0.5, 2)` and a uniform label.
    pub fn random(rng: &mut impl Rng, d: usize, h: usize) -> Self {
        Self {
            x: normal_vec(rng, d, 1.0),
            w1: normal_vec(rng, d * h, 1.0 / (d as f64).sqrt()),
            b1: normal_vec(rng, h, 0.1),
            w2: normal_vec(rng, h * d, 1.0 / (h as f64).sqrt()),
            b2: normal_vec(rng, d, 0.1),
            gamma: rng.random_range(0.5..2.0),
            epsilon: THEORY_EPSILON,
            label: rng.random_range(0..d),
            scale_injection: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale_injection = scale;
        self
    }

    pub fn one_hot(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|j| if j == self.label { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h) = (self.dim(), self.hidden());
        if d == 0 || h == 0 {
            return Err(Error::InvalidArgument("D and H must be at least 1".into()));
        }
        if self.w1.len() != d * h || self.w2.len() != h * d || self.b2.len() != d {
            return Err(Error::shape(
                "theory case",
                &[d, h],
                &[self.w1.len(), self.w2.len(), self.b2.len()],
            ));
        }
        if self.label >= d {
            return Err(Error::TokenOutOfRange {
                token: self.label,
                vocab: d,
            });
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidArgument("epsilon must be non-negative".into()));
        }
        Ok(())
    }

    /// Same case with the label moved to the smallest output logit of
    /// `block`, keeping `p^ - y` away from zero.
    pub fn with_adversarial_label(mut self, block: Block) -> Result<Self> {
        let out = record(&self, block)?;
        let o = out.tape.value(out.output).data();
        self.label = (0..o.len()).min_by(|&a, &b| o[a].total_cmp(&o[b])).unwrap();
        Ok(self)
    }
}

struct Recorded {
    tape: Tape<f64>,
    inputs: [Var; 5],
    h: Var,
    a: Var,
    /// Pre-softmax logits `o`.
    output: Var,
}

fn vector(v: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![1, v.len()], v.to_vec()).expect("length matches")
}

fn record(case: &TheoryCase, block: Block) -> Result<Recorded> {
    case.validate()?;
    let (d, h) = (case.dim(), case.hidden());
    let mut t = Tape::new();
    let x = t.param(vector(&case.x));
    let w1 = t.param(Tensor::new(vec![d, h], case.w1.clone())?);
    let b1 = t.param(Tensor::new(vec![h], case.b1.clone())?);
    let w2 = t.param(Tensor::new(vec![h, d], case.w2.clone())?);
    let b2 = t.param(Tensor::new(vec![d], case.b2.clone())?);
    let gamma = t.constant(Tensor::full(vec![d], case.gamma));
    let eps = case.epsilon;
    let w1s = t.scale(w1, case.scale_injection);
    let input = match block {
        Block::PreLn | Block::PeriLn => t.rmsnorm(x, gamma, eps)?,
        Block::PostLn => x,
    };
    let z = t.matmul(input, w1s)?;
    let z = t.add_row(z, b1)?;
    let hv = t.relu(z);
    let a = t.matmul(hv, w2)?;
    let a = t.add_row(a, b2)?;
    let output = match block {
        Block::PreLn => t.add(x, a)?,
        Block::PeriLn => {
            let na = t.rmsnorm(a, gamma, eps)?;
            t.add(x, na)?
        }
        Block::PostLn => {
            let s = t.add(x, a)?;
            t.rmsnorm(s, gamma, eps)?
        }
    };
    Ok(Recorded {
        tape: t,
        inputs: [x, w1, b1, w2, b2],
        h: hv,
        a,
        output,
    })
}

/// Cross-entropy loss of `block` on `case`, forward only.
pub fn block_loss(case: &TheoryCase, block: Block) -> Result<f64> {
    let mut r = record(case, block)?;
    let loss = r.tape.softmax_xent(r.output, &[case.label])?;
    Ok(r.tape.value(loss).data()[0])
}

struct Evaluated {
    loss: f64,
    grad_w2: Vec<f64>,
    h: Vec<f64>,
    a: Vec<f64>,
    probs: Vec<f64>,
    x_plus_a: Vec<f64>,
}

fn evaluate(case: &TheoryCase, block: Block) -> Result<Evaluated> {
    let mut r = record(case, block)?;
    let loss = r.tape.softmax_xent(r.output, &[case.label])?;
    r.tape.backward(loss)?;
    let probs = r
        .tape
        .saved_probs(loss)
        .expect("loss node keeps probabilities")
        .to_vec();
    let h = r.tape.value(r.h).data().to_vec();
    let a = r.tape.value(r.a).data().to_vec();
    let x_plus_a = case.x.iter().zip(&a).map(|(x, a)| x + a).collect();
    Ok(Evaluated {
        loss: r.tape.value(loss).data()[0],
        grad_w2: r.tape.grad_or_zeros(r.inputs[3]),
        h,
        a,
        probs,
        x_plus_a,
    })
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreLnResult {
    pub loss: f64,
    /// `dL/dW2` from the tape, `H x D`.
    pub autodiff: Vec<f64>,
    /// `h (p^ - y)^T`, computed without the tape.
    pub analytic: Vec<f64>,
    pub max_abs_error: f64,
}

/// Direct evaluation of `h` and `p^` for the Pre-LN block.
fn preln_closed_form(case: &TheoryCase) -> (Vec<f64>, Vec<f64>) {
    let (d, hd) = (case.dim(), case.hidden());
    let ms = case.x.iter().map(|v| v * v).sum::<f64>() / d as f64;
    let inv = 1.0 / (ms + case.epsilon).sqrt();
    let xt: Vec<f64> = case.x.iter().map(|v| case.gamma * v * inv).collect();
    let h: Vec<f64> = (0..hd)
        .map(|j| {
            let z = case.b1[j]
                + (0..d)
                    .map(|i| xt[i] * case.w1[i * hd + j] * case.scale_injection)
                    .sum::<f64>();
            z.max(0.0)
        })
        .collect();
    let o: Vec<f64> = (0..d)
        .map(|j| case.x[j] + case.b2[j] + (0..hd).map(|i| h[i] * case.w2[i * d + j]).sum::<f64>())
        .collect();
    let m = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = o.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    (h, e.iter().map(|v| v / z).collect())
}

/// Pre-LN block: autodiff `dL/dW2` against the closed form `h_i (p^_j - y_j)`.
pub fn preln_block(case: &TheoryCase) -> Result<PreLnResult> {
    let ev = evaluate(case, Block::PreLn)?;
    let (h, p) = preln_closed_form(case);
    let y = case.one_hot();
    let d = case.dim();
    let analytic: Vec<f64> = h
        .iter()
        .flat_map(|&hi| (0..d).map(move |j| (hi, j)))
        .map(|(hi, j)| hi * (p[j] - y[j]))
        .collect();
    let max_abs_error = ev
        .grad_w2
        .iter()
        .zip(&analytic)
        .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()));
    Ok(PreLnResult {
        loss: ev.loss,
        autodiff: ev.grad_w2,
        analytic,
        max_abs_error,
    })
}

/// The three factors whose product gives the bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundFactors {
    /// `|p^ - y|`, at most 2.
    pub residual_norm: f64,
    /// Spectral norm of the output RMSNorm Jacobian.
    pub jacobian_norm: f64,
    /// `2 gamma sqrt(D) / |input|`.
    pub jacobian_bound: f64,
    /// `|h|`, which bounds `|da / dW2_ij|`.
    pub h_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundResult {
    pub loss: f64,
    pub autodiff: Vec<f64>,
    pub max_entry: f64,
    pub bound: f64,
    pub factors: BoundFactors,
    /// Entries with `|dL/dW2_ij| > bound`.
    pub violations: usize,
}

fn bounded_block(case: &TheoryCase, block: Block, bound_scale: f64) -> Result<BoundResult> {
    let ev = evaluate(case, block)?;
    let normed = if block == Block::PeriLn { &ev.a } else { &ev.x_plus_a };
    let d = case.dim() as f64;
    let n = l2(normed);
    if n == 0.0 {
        return Err(Error::UndefinedBound(if block == Block::PeriLn {
            "|a| = 0"
        } else {
            "|x + a| = 0"
        }));
    }
    let h_norm = l2(&ev.h);
    let bound = bound_scale * 4.0 * case.gamma.abs() * d.sqrt() * h_norm / n;
    let y = case.one_hot();
    let resid: Vec<f64> = ev.probs.iter().zip(&y).map(|(p, y)| p - y).collect();
    let j = rmsnorm_jacobian(normed, case.gamma, case.epsilon);
    let factors = BoundFactors {
        residual_norm: l2(&resid),
        jacobian_norm: spectral_norm(&j, normed.len(), normed.len()),
        jacobian_bound: jacobian_norm_bound(normed, case.gamma.abs())?,
        h_norm,
    };
    let violations = ev.grad_w2.iter().filter(|g| g.abs() > bound).count();
    Ok(BoundResult {
        loss: ev.loss,
        max_entry: max_abs(&ev.grad_w2),
        autodiff: ev.grad_w2,
        bound,
        factors,
        violations,
    })
}

/// Peri-LN block against `4 gamma sqrt(D) |h| / |a|`.
pub fn periln_block(case: &TheoryCase) -> Result<BoundResult> {
    bounded_block(case, Block::PeriLn, 1.0)
}

/// Post-LN block against `4 gamma sqrt(D) |h| / |x + a|`.
pub fn postln_block(case: &TheoryCase) -> Result<BoundResult> {
    bounded_block(case, Block::PostLn, 1.0)
}

/// Relative error of every autodiff input gradient of `block` against
/// central differences, worst over `x`, `W1`, `b1`, `W2`, `b2`.
pub fn fd_check(case: &TheoryCase, block: Block, step: f64) -> Result<f64> {
    let mut r = record(case, block)?;
    let loss = r.tape.softmax_xent(r.output, &[case.label])?;
    r.tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (k, &var) in r.inputs.iter().enumerate() {
        let analytic = r.tape.grad_or_zeros(var);
        let x0 = r.tape.value(var).clone();
        let fd = fd_gradient(
            |t| {
                let mut c = case.clone();
                let field = match k {
                    0 => &mut c.x,
                    1 => &mut c.w1,
                    2 => &mut c.b1,
                    3 => &mut c.w2,
                    _ => &mut c.b2,
                };
                field.copy_from_slice(t.data());
                block_loss(&c, block).expect("case stays valid")
            },
            &x0,
            step,
        )?;
        worst = worst.max(relative_error(&analytic, fd.data()));
    }
    Ok(worst)
}

/// Result of inflating `x` while holding `a` fixed in the Post-LN block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InflationCheck {
    pub factor: f64,
    /// `bound(inflated) / bound(base)`.
    pub bound_ratio: f64,
    /// `|x + a|(base) / |x + a|(inflated)`.
    pub norm_ratio: f64,
    /// `max entry(inflated) / max entry(base)`.
    pub grad_ratio: f64,
}

/// Scales `x` by `factor` and `W1` by `1 / factor`, so `h` and `a` are unchanged.
pub fn postln_inflation(case: &TheoryCase, factor: f64) -> Result<InflationCheck> {
    let base = postln_block(case)?;
    let mut big = case.clone();
    big.x.iter_mut().for_each(|v| *v *= factor);
    big.scale_injection /= factor;
    let inflated = postln_block(&big)?;
    let xa = |c: &TheoryCase| -> Result<f64> {
        let ev = evaluate(c, Block::PostLn)?;
        Ok(l2(&ev.x_plus_a))
    };
    Ok(InflationCheck {
        factor,
        bound_ratio: inflated.bound / base.bound,
        norm_ratio: xa(case)? / xa(&big)?,
        grad_ratio: inflated.max_entry / base.max_entry,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn case(seed: u64) -> TheoryCase {
        TheoryCase::random(&mut ChaCha8Rng::seed_from_u64(seed), 8, 16)
    }

    #[test]
    fn preln_identity_holds() {
        for s in 0..10 {
            let r = preln_block(&case(s)).unwrap();
            assert!(r.max_abs_error < IDENTITY_TOLERANCE, "{}", r.max_abs_error);
        }
    }

    #[test]
    fn dead_relu_gives_zero_gradient() {
        let mut c = case(1);
        c.b1.iter_mut().for_each(|b| *b = -1e3);
        let r = preln_block(&c).unwrap();
        assert!(r.analytic.iter().all(|&v| v == 0.0));
        assert!(r.autodiff.iter().all(|&v| v == 0.0));
        let p = postln_block(&c).unwrap();
        assert_eq!(p.bound, 0.0);
        assert_eq!(p.max_entry, 0.0);
    }

    #[test]
    fn confident_correct_prediction_has_tiny_gradient() {
        let mut c = case(2);
        c.x[c.label] += 1e3;
        let r = preln_block(&c).unwrap();
        assert!(r.autodiff.iter().all(|v| v.abs() < 1e-100));
    }

    #[test]
    fn bounds_hold_and_factors_are_consistent() {
        for s in 0..20 {
            for block in [Block::PeriLn, Block::PostLn] {
                let r = bounded_block(&case(s), block, 1.0).unwrap();
                assert_eq!(r.violations, 0);
                assert!(r.factors.residual_norm <= 2.0);
                assert!(r.factors.jacobian_norm <= r.factors.jacobian_bound);
                assert!(r.max_entry <= r.bound);
            }
        }
    }

    #[test]
    fn zero_gamma_gives_zero_peri_gradient() {
        let mut c = case(3);
        c.gamma = 0.0;
        let r = periln_block(&c).unwrap();
        assert_eq!(r.bound, 0.0);
        assert!(r.autodiff.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_output_has_undefined_bound() {
        let mut c = case(4);
        c.w2.iter_mut().for_each(|v| *v = 0.0);
        c.b2.iter_mut().for_each(|v| *v = 0.0);
        assert!(matches!(periln_block(&c), Err(Error::UndefinedBound(_))));
    }

    #[test]
    fn blocks_match_finite_differences() {
        for block in Block::ALL {
            let err = fd_check(&case(5), block, 1e-6).unwrap();
            assert!(err < 1e-6, "{block:?} {err:e}");
        }
    }

    #[test]
    fn adversarial_label_is_argmin() {
        let c = case(6).with_adversarial_label(Block::PreLn).unwrap();
        let r = preln_block(&c).unwrap();
        let d = c.dim();
        // the label column carries p^ - 1, the most negative residual
        let col: f64 = (0..c.hidden()).map(|i| r.analytic[i * d + c.label]).sum();
        assert!(col <= 0.0);
    }

    #[test]
    fn inflating_x_shrinks_post_ln_gradient() {
        let chk = postln_inflation(&case(7), 1e4).unwrap();
        assert!((chk.bound_ratio / chk.norm_ratio - 1.0).abs() < 1e-6);
        assert!(chk.bound_ratio < 1e-3);
        assert!(chk.grad_ratio < 1e-2, "{chk:?}");
    }
}
