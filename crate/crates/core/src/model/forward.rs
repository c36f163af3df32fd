use super::config::{PlacementKind, PositionKind, TransformerConfig};
use super::state::{AttentionLayout, MlpLayout, ModelState, NormSite, ParamId, SublayerNorms};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::norm::NormKind;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `batch` sequences of `seq` next-token pairs, flattened row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, inputs: Vec<usize>, targets: Vec<usize>) -> Result<Self> {
        if batch == 0 || seq == 0 {
            return Err(Error::EmptyBatch);
        }
        if inputs.len() != batch * seq || targets.len() != batch * seq {
            return Err(Error::shape(
                "token batch",
                &[batch, seq],
                &[inputs.len(), targets.len()],
            ));
        }
        Ok(Self {
            batch,
            seq,
            inputs,
            targets,
        })
    }

    /// Splits each window of `seq + 1` tokens into input and shifted target.
    pub fn from_windows(windows: &[Vec<usize>]) -> Result<Self> {
        let seq = windows.first().map_or(0, |w| w.len().saturating_sub(1));
        if windows.is_empty() || seq == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut inputs = Vec::with_capacity(windows.len() * seq);
        let mut targets = Vec::with_capacity(windows.len() * seq);
        for w in windows {
            if w.len() != seq + 1 {
                return Err(Error::shape("token batch", &[seq + 1], &[w.len()]));
            }
            inputs.extend_from_slice(&w[..seq]);
            targets.extend_from_slice(&w[1..]);
        }
        Self::new(windows.len(), seq, inputs, targets)
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.seq
    }
}

/// A normalization whose parameters are already on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundNorm {
    pub kind: NormKind,
    pub gamma: Var,
    pub beta: Option<Var>,
    pub epsilon: f64,
}

impl BoundNorm {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self.kind {
            NormKind::RmsNorm => tape.rmsnorm(x, self.gamma, self.epsilon),
            NormKind::LayerNorm => tape.layernorm(x, self.gamma, self.beta, self.epsilon),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BoundSublayerNorms {
    pub input: Option<BoundNorm>,
    pub output: Option<BoundNorm>,
    pub post: Option<BoundNorm>,
}

fn maybe_norm<T: Scalar>(tape: &mut Tape<T>, norm: Option<BoundNorm>, x: Var) -> Result<Var> {
    match norm {
        Some(n) => n.apply(tape, x),
        None => Ok(x),
    }
}

/// Wires one residual sublayer around `module` according to `kind`.
///
/// * PostLN: `post(x + module(x))`
/// * PreLN: `x + module(input(x))`
/// * PeriLN: `x + output(module(input(x)))`
/// * PeriLN with QK-Norm: `x + output(module(x))`; the module normalizes Q/K itself.
pub fn sublayer_forward<T, F>(
    tape: &mut Tape<T>,
    x: Var,
    kind: PlacementKind,
    norms: &BoundSublayerNorms,
    module: F,
) -> Result<Var>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, Var) -> Result<Var>,
{
    match kind {
        PlacementKind::PostLn => {
            let m = module(tape, x)?;
            let sum = tape.add(x, m)?;
            maybe_norm(tape, norms.post, sum)
        }
        PlacementKind::PreLn => {
            let h = maybe_norm(tape, norms.input, x)?;
            let m = module(tape, h)?;
            tape.add(x, m)
        }
        PlacementKind::PeriLn | PlacementKind::PeriLnQkNorm => {
            let h = maybe_norm(tape, norms.input, x)?;
            let m = module(tape, h)?;
            let m = maybe_norm(tape, norms.output, m)?;
            tape.add(x, m)
        }
    }
}

/// Attention projections bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub q_norm: Option<BoundNorm>,
    pub k_norm: Option<BoundNorm>,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub position: PositionKind,
    pub rope_base: f64,
    pub qk_norm_before_rope: bool,
}

/// Multi-head causal self-attention over `[batch*seq, d_model]` rows.
///
/// With QK-Norm, each head's query and key rows are normalized over
/// `d_head`; by default before RoPE.
pub fn attention_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: &AttentionVars,
    shape: &AttentionShape,
) -> Result<Var> {
    let d_model = shape.n_heads * shape.d_head;
    if tape.value(x).last_dim() != d_model {
        return Err(Error::shape("attention", tape.shape(x), &[d_model]));
    }
    let rows = tape.value(x).rows();
    let mut q = tape.matmul(x, w.wq)?;
    let mut k = tape.matmul(x, w.wk)?;
    let v = tape.matmul(x, w.wv)?;
    let rope = |tape: &mut Tape<T>, t: Var| -> Result<Var> {
        match shape.position {
            PositionKind::Rope => tape.rope(t, shape.n_heads, shape.seq, shape.rope_base),
            PositionKind::None => Ok(t),
        }
    };
    let head_norm = |tape: &mut Tape<T>, t: Var, n: Option<BoundNorm>| -> Result<Var> {
        let Some(n) = n else { return Ok(t) };
        let per_head = tape.reshape(t, &[rows * shape.n_heads, shape.d_head])?;
        let normed = n.apply(tape, per_head)?;
        tape.reshape(normed, &[rows, d_model])
    };
    if shape.qk_norm_before_rope {
        q = head_norm(tape, q, w.q_norm)?;
        k = head_norm(tape, k, w.k_norm)?;
        q = rope(tape, q)?;
        k = rope(tape, k)?;
    } else {
        q = rope(tape, q)?;
        k = rope(tape, k)?;
        q = head_norm(tape, q, w.q_norm)?;
        k = head_norm(tape, k, w.k_norm)?;
    }
    let ctx = tape.causal_attention(q, k, v, shape.batch, shape.seq, shape.n_heads)?;
    tape.matmul(ctx, w.wo)
}

/// `(silu(x W_gate) * (x W_up)) W_down`.
pub fn silu_glu<T: Scalar>(tape: &mut Tape<T>, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
    let g = tape.matmul(x, w_gate)?;
    let g = tape.silu(g);
    let u = tape.matmul(x, w_up)?;
    let h = tape.mul(g, u)?;
    tape.matmul(h, w_down)
}

/// `relu(x W1 + b1) W2 + b2`.
pub fn relu_mlp<T: Scalar>(tape: &mut Tape<T>, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let a = tape.matmul(h, w2)?;
    tape.add_row(a, b2)
}

/// Tape handles of every parameter, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Values recorded by [`ModelState::forward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `residuals[0]` enters layer 0 (after any embedding norm);
    /// `residuals[l + 1]` leaves layer `l`.
    pub residuals: Vec<Var>,
    pub logits: Var,
}

impl<T: Scalar> ModelState<T> {
    /// Puts every parameter on `tape`. With `trainable = false`, or for a
    /// frozen parameter, the leaf is a constant.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable && !p.frozen {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    fn bind_norm(&self, bound: &Bound, site: Option<NormSite>) -> Option<BoundNorm> {
        site.map(|s| BoundNorm {
            kind: s.kind,
            gamma: bound.var(s.gamma),
            beta: s.beta.map(|b| bound.var(b)),
            epsilon: self.strategy.epsilon,
        })
    }

    fn bind_sublayer(&self, bound: &Bound, n: &SublayerNorms) -> BoundSublayerNorms {
        BoundSublayerNorms {
            input: self.bind_norm(bound, n.input),
            output: self.bind_norm(bound, n.output),
            post: self.bind_norm(bound, n.post),
        }
    }

    fn attention_vars(&self, bound: &Bound, a: &AttentionLayout) -> AttentionVars {
        AttentionVars {
            wq: bound.var(a.wq),
            wk: bound.var(a.wk),
            wv: bound.var(a.wv),
            wo: bound.var(a.wo),
            q_norm: self.bind_norm(bound, a.q_norm),
            k_norm: self.bind_norm(bound, a.k_norm),
        }
    }

    fn attention_shape(&self, batch: &TokenBatch) -> AttentionShape {
        let c: &TransformerConfig = &self.config;
        AttentionShape {
            batch: batch.batch,
            seq: batch.seq,
            n_heads: c.n_heads,
            d_head: c.d_head,
            position: c.position,
            rope_base: c.rope_base,
            qk_norm_before_rope: self.strategy.qk_norm_before_rope,
        }
    }

    /// embed -> (embedding norm) -> layers -> (final norm) -> unembed.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, batch: &TokenBatch) -> Result<ForwardTrace> {
        let l = &self.layout;
        let kind = self.strategy.kind;
        let mut x = tape.embedding(bound.var(l.embedding), &batch.inputs)?;
        x = maybe_norm(tape, self.bind_norm(bound, l.embed_norm), x)?;
        let mut residuals = vec![x];
        let shape = self.attention_shape(batch);
        for layer in &l.layers {
            let aw = self.attention_vars(bound, &layer.attn);
            let norms = self.bind_sublayer(bound, &layer.attn_norms);
            x = sublayer_forward(tape, x, kind, &norms, |t, h| attention_forward(t, h, &aw, &shape))?;
            let norms = self.bind_sublayer(bound, &layer.mlp_norms);
            x = sublayer_forward(tape, x, kind, &norms, |t, h| match layer.mlp {
                MlpLayout::SwiGlu { gate, up, down } => silu_glu(t, h, bound.var(gate), bound.var(up), bound.var(down)),
                MlpLayout::Relu { w1, b1, w2, b2 } => {
                    relu_mlp(t, h, bound.var(w1), bound.var(b1), bound.var(w2), bound.var(b2))
                }
            })?;
            residuals.push(x);
        }
        x = maybe_norm(tape, self.bind_norm(bound, l.final_norm), x)?;
        let logits = match l.unembedding {
            Some(u) => tape.matmul(x, bound.var(u))?,
            None => tape.matmul_nt(x, bound.var(l.embedding))?,
        };
        Ok(ForwardTrace { residuals, logits })
    }

    /// Mean next-token cross-entropy on `batch`.
    pub fn loss(&self, tape: &mut Tape<T>, bound: &Bound, batch: &TokenBatch) -> Result<(ForwardTrace, Var)> {
        let trace = self.forward(tape, bound, batch)?;
        let loss = tape.softmax_xent(trace.logits, &batch.targets)?;
        Ok((trace, loss))
    }

    /// Copies parameter gradients off `tape` into each `Param::value.grad`.
    /// Parameters the loss never reached (and frozen ones) get exact zeros.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            p.value.grad = Some(tape.grad_or_zeros(v));
        }
    }

    /// Forward + backward on one batch; fills parameter gradients and
    /// returns the loss.
    pub fn forward_backward(&mut self, batch: &TokenBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, true);
        let (_, loss) = self.loss(&mut tape, &bound, batch)?;
        tape.backward(loss)?;
        self.collect_grads(&tape, &bound);
        Ok(tape.value(loss).data()[0].to_f64_lossy())
    }

    /// Forward only: residual stream after the embedding and after every layer.
    pub fn residual_stream(&self, batch: &TokenBatch) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let trace = self.forward(&mut tape, &bound, batch)?;
        Ok(trace.residuals.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Forward only: mean cross-entropy on `batch`.
    pub fn eval_loss(&self, batch: &TokenBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let (_, loss) = self.loss(&mut tape, &bound, batch)?;
        Ok(tape.value(loss).data()[0].to_f64_lossy())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{fd_gradient, max_relative_error};
    use crate::model::{init_parameters, MlpKind, PlacementStrategy};

    fn batch(seq: usize) -> TokenBatch {
        let windows: Vec<Vec<usize>> = (0..2)
            .map(|b| (0..=seq).map(|i| (i * 37 + b * 11 + 3) % 257).collect())
            .collect();
        TokenBatch::from_windows(&windows).unwrap()
    }

    fn config() -> TransformerConfig {
        let mut c = TransformerConfig::tiny();
        c.init_std = 0.3;
        c.seq_len = 4;
        c
    }

    fn strategies() -> Vec<PlacementStrategy> {
        vec![
            PlacementStrategy::post_ln(),
            PlacementStrategy::pre_ln(),
            PlacementStrategy::peri_ln(),
            PlacementStrategy::peri_ln_qk_norm(),
            PlacementStrategy::pre_ln().with_norm(NormKind::LayerNorm),
        ]
    }

    #[test]
    fn zero_module_is_identity_for_pre_and_peri() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(vec![2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap());
        let g = tape.constant(Tensor::full(vec![3], 1.0));
        let n = BoundNorm {
            kind: NormKind::RmsNorm,
            gamma: g,
            beta: None,
            epsilon: 1e-6,
        };
        let norms = BoundSublayerNorms {
            input: Some(n),
            output: Some(n),
            post: Some(n),
        };
        for kind in [PlacementKind::PreLn, PlacementKind::PeriLn] {
            let y = sublayer_forward(&mut tape, x, kind, &norms, |t, h| Ok(t.scale(h, 0.0))).unwrap();
            assert_eq!(tape.value(y).data(), tape.value(x).data());
        }
        let y = sublayer_forward(&mut tape, x, PlacementKind::PostLn, &norms, |t, h| Ok(t.scale(h, 0.0))).unwrap();
        for row in tape.value(y).data().chunks(3) {
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / 3.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn logits_have_vocab_width() {
        let c = config();
        let state = init_parameters::<f64>(&c, &PlacementStrategy::peri_ln(), 0).unwrap();
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape, false);
        let b = batch(4);
        let trace = state.forward(&mut tape, &bound, &b).unwrap();
        assert_eq!(tape.shape(trace.logits), &[8, c.vocab_size]);
        assert_eq!(trace.residuals.len(), c.n_layers + 1);
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let b = batch(4);
        for s in strategies() {
            for mlp in [MlpKind::SwiGlu, MlpKind::Relu] {
                let mut c = config();
                c.mlp = mlp;
                c.tie_embeddings = mlp == MlpKind::Relu;
                let mut state = init_parameters::<f64>(&c, &s, 5).unwrap();
                state.forward_backward(&b).unwrap();
                for id in 0..state.params.len() {
                    let p = &state.params[id];
                    let analytic: Vec<f64> = p.value.grad.clone().unwrap();
                    let probe = state.clone();
                    let fd = fd_gradient(
                        |t| {
                            let mut m = probe.clone();
                            m.params[id].value = t.clone();
                            m.eval_loss(&b).unwrap()
                        },
                        &p.value,
                        1e-5,
                    )
                    .unwrap();
                    let err = max_relative_error(&analytic, fd.data());
                    let scale = fd.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    let abs = analytic
                        .iter()
                        .zip(fd.data())
                        .fold(0.0f64, |m, (a, f)| m.max((a - f).abs()));
                    assert!(
                        err < 1e-4 || abs < 1e-7 * scale.max(1.0),
                        "{} {:?} {}: rel {err:e} abs {abs:e}",
                        s.label(),
                        mlp,
                        p.name
                    );
                }
            }
        }
    }

    #[test]
    fn frozen_gammas_get_zero_gradient() {
        let s = PlacementStrategy::peri_ln().with_frozen_output_ln(true);
        let mut state = init_parameters::<f64>(&config(), &s, 2).unwrap();
        state.forward_backward(&batch(4)).unwrap();
        for (_, a, m) in state.output_norms().unwrap() {
            for site in [a, m] {
                let p = state.param(site.gamma);
                assert!(p.frozen);
                assert!(p.value.grad.as_ref().unwrap().iter().all(|&g| g == 0.0));
            }
        }
    }

    #[test]
    fn rejects_bad_batches() {
        assert!(TokenBatch::new(0, 4, vec![], vec![]).is_err());
        assert!(TokenBatch::new(1, 4, vec![1, 2], vec![1, 2]).is_err());
        assert!(TokenBatch::from_windows(&[vec![1, 2, 3], vec![1, 2]]).is_err());
        let state = init_parameters::<f64>(&config(), &PlacementStrategy::pre_ln(), 0).unwrap();
        let b = TokenBatch::new(1, 2, vec![1, 999], vec![1, 2]).unwrap();
        assert!(matches!(state.eval_loss(&b), Err(Error::TokenOutOfRange { .. })));
    }
}
