//! Forward recording and backward rules for every tape operation.

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::norm::kernel as normk;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn accum<T: Scalar>(grads: &mut [Option<Vec<T>>], len: usize, v: Var) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Tape<T> {
    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    /// `a[..., K] x b[K, N] -> [..., N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.values[a.0].len() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            (self.values[a.0].data(), k, 1),
            (self.values[b.0].data(), n, 1),
            T::zero(),
            (&mut out, n, 1),
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }, needs))
    }

    /// `a[..., K] x b[N, K]^T -> [..., N]` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || sa[sa.len() - 1] != sb[1] {
            return Err(Error::shape("matmul_nt", &sa, &sb));
        }
        let (n, k) = (sb[0], sb[1]);
        let m = self.values[a.0].len() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            (self.values[a.0].data(), k, 1),
            (self.values[b.0].data(), 1, k),
            T::zero(),
            (&mut out, n, 1),
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMulNt { a, b }, needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, needs))
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let d = self.values[a.0].last_dim();
        if self.values[bias.0].len() != d {
            return Err(Error::shape("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.values[bias.0].data();
        let data = self.values[a.0]
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(&[a, bias]);
        Ok(self.push(t, Op::AddRow { a, bias }, needs))
    }

    /// Elementwise product of equal-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.values[a.0].data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same length");
        let needs = self.needs(&[a]);
        self.push(t, Op::Scale { a, c }, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.values[a.0]
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same length");
        let needs = self.needs(&[a]);
        self.push(t, Op::Relu { a }, needs)
    }

    /// `z * sigmoid(z)`, elementwise.
    pub fn silu(&mut self, a: Var) -> Var {
        let data = self.values[a.0].data().iter().map(|&x| x * sigmoid(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same length");
        let needs = self.needs(&[a]);
        self.push(t, Op::Silu { a }, needs)
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].data().iter().copied().sum();
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.values[a.0].clone().reshaped(shape.to_vec())?;
        let needs = self.needs(&[a]);
        Ok(self.push(t, Op::Reshape { a }, needs))
    }

    /// Gathers rows of `table[V, D]`; the output has shape `[tokens.len(), D]`.
    pub fn embedding(&mut self, table: Var, tokens: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::shape("embedding", shape, &[]));
        }
        let (vocab, d) = (shape[0], shape[1]);
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfRange { token: bad, vocab });
        }
        let src = self.values[table.0].data();
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            out.extend_from_slice(&src[t * d..(t + 1) * d]);
        }
        let t = Tensor::new(vec![tokens.len(), d], out)?;
        let needs = self.needs(&[table]);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                tokens: tokens.to_vec(),
            },
            needs,
        ))
    }

    /// Row-wise RMSNorm over the trailing dimension, scaled by `gamma`.
    pub fn rmsnorm(&mut self, x: Var, gamma: Var, eps: f64) -> Result<Var> {
        let d = self.values[x.0].last_dim();
        if self.values[gamma.0].len() != d {
            return Err(Error::shape("rmsnorm", self.shape(x), self.shape(gamma)));
        }
        let xv = &self.values[x.0];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_rms = vec![T::zero(); xv.rows()];
        normk::rmsnorm_forward(
            xv.data(),
            self.values[gamma.0].data(),
            T::from_f64_lossy(eps),
            &mut out,
            &mut inv_rms,
        );
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(&[x, gamma]);
        Ok(self.push(t, Op::RmsNorm { x, gamma, inv_rms }, needs))
    }

    /// Row-wise LayerNorm; `beta` is optional.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Option<Var>, eps: f64) -> Result<Var> {
        let d = self.values[x.0].last_dim();
        if self.values[gamma.0].len() != d {
            return Err(Error::shape("layernorm", self.shape(x), self.shape(gamma)));
        }
        if let Some(b) = beta {
            if self.values[b.0].len() != d {
                return Err(Error::shape("layernorm", self.shape(x), self.shape(b)));
            }
        }
        let xv = &self.values[x.0];
        let rows = xv.rows();
        let mut out = vec![T::zero(); xv.len()];
        let mut mean = vec![T::zero(); rows];
        let mut inv_std = vec![T::zero(); rows];
        normk::layernorm_forward(
            xv.data(),
            self.values[gamma.0].data(),
            beta.map(|b| self.values[b.0].data()),
            T::from_f64_lossy(eps),
            &mut out,
            &mut mean,
            &mut inv_std,
        );
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let mut inputs = vec![x, gamma];
        inputs.extend(beta);
        let needs = self.needs(&inputs);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            needs,
        ))
    }

    /// Rotary position embedding on `[batch*seq, heads*d_head]` rows.
    ///
    /// Dimension `i` of each head is paired with `i + d_head/2`; row `r` sits
    /// at position `r % seq`.
    pub fn rope(&mut self, a: Var, heads: usize, seq: usize, base: f64) -> Result<Var> {
        let width = self.values[a.0].last_dim();
        if heads == 0 || !width.is_multiple_of(heads) || !(width / heads).is_multiple_of(2) || seq == 0 {
            return Err(Error::InvalidArgument(format!(
                "rope: width {width} does not split into {heads} even-sized heads"
            )));
        }
        let dh = width / heads;
        let half = dh / 2;
        let mut cos = Vec::with_capacity(seq * half);
        let mut sin = Vec::with_capacity(seq * half);
        for p in 0..seq {
            for i in 0..half {
                let theta = p as f64 * base.powf(-2.0 * i as f64 / dh as f64);
                cos.push(T::from_f64_lossy(theta.cos()));
                sin.push(T::from_f64_lossy(theta.sin()));
            }
        }
        let src = self.values[a.0].data();
        let mut out = vec![T::zero(); src.len()];
        rotate(src, &mut out, width, dh, seq, &cos, &sin, false);
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let needs = self.needs(&[a]);
        Ok(self.push(
            t,
            Op::Rope {
                a,
                heads,
                seq,
                cos,
                sin,
            },
            needs,
        ))
    }

    /// Multi-head causal scaled-dot-product attention.
    ///
    /// `q`, `k`, `v` hold `batch*seq` rows of `heads*d_head` features; the
    /// result has the same layout (heads concatenated, before any output
    /// projection).
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if self.shape(k) != sq.as_slice() || self.shape(v) != sq.as_slice() {
            return Err(Error::shape("causal_attention", &sq, self.shape(k)));
        }
        let width = self.values[q.0].last_dim();
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "attention: width {width} not divisible into {heads} heads"
            )));
        }
        if self.values[q.0].rows() != batch * seq {
            return Err(Error::shape("causal_attention", &sq, &[batch, seq, width]));
        }
        let (out, probs) = super::attention::forward(
            self.values[q.0].data(),
            self.values[k.0].data(),
            self.values[v.0].data(),
            batch,
            seq,
            heads,
            width,
        );
        let t = Tensor::new(sq, out)?;
        let needs = self.needs(&[q, k, v]);
        Ok(self.push(
            t,
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            needs,
        ))
    }

    /// Mean cross-entropy of row-wise softmax against integer targets.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = &self.values[logits.0];
        let classes = lv.last_dim();
        if lv.rows() != targets.len() || targets.is_empty() {
            return Err(Error::shape("softmax_xent", lv.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                vocab: classes,
            });
        }
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = 0.0f64;
        for ((row, p), &t) in lv.data().chunks(classes).zip(probs.chunks_mut(classes)).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - max).exp();
                z += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= z;
            }
            // log-sum-exp form keeps the loss finite when p[t] underflows
            total += (max + z.ln() - row[t]).to_f64_lossy();
        }
        let loss = T::from_f64_lossy(total / targets.len() as f64);
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Softmax cross-entropy of one logit row against a one-hot label tensor.
    pub fn softmax_xent_onehot(&mut self, logits: Var, label: &Tensor<T>) -> Result<Var> {
        let target = one_hot_index(label)?;
        if label.len() != self.values[logits.0].len() {
            return Err(Error::shape("softmax_xent", self.shape(logits), label.shape()));
        }
        self.softmax_xent(logits, &[target])
    }

    /// Softmax probabilities saved by a cross-entropy node.
    pub fn saved_probs(&self, loss: Var) -> Option<&[T]> {
        match &self.ops[loss.0] {
            Op::SoftmaxXent { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub(super) fn propagate(&mut self, i: usize, g: &[T]) {
        let Self {
            values,
            grads,
            ops,
            needs_grad,
            ..
        } = self;
        let needs = |v: Var| needs_grad[v.0];
        match &ops[i] {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (&values[a.0], &values[b.0]);
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.len() / k.max(1);
                if needs(*a) {
                    let da = accum(grads, av.len(), *a);
                    T::gemm(m, n, k, T::one(), (g, n, 1), (bv.data(), 1, n), T::one(), (da, k, 1));
                }
                if needs(*b) {
                    let db = accum(grads, bv.len(), *b);
                    T::gemm(k, m, n, T::one(), (av.data(), 1, k), (g, n, 1), T::one(), (db, n, 1));
                }
            }
            Op::MatMulNt { a, b } => {
                let (av, bv) = (&values[a.0], &values[b.0]);
                let (n, k) = (bv.shape()[0], bv.shape()[1]);
                let m = av.len() / k.max(1);
                if needs(*a) {
                    let da = accum(grads, av.len(), *a);
                    T::gemm(m, n, k, T::one(), (g, n, 1), (bv.data(), k, 1), T::one(), (da, k, 1));
                }
                if needs(*b) {
                    let db = accum(grads, bv.len(), *b);
                    T::gemm(n, m, k, T::one(), (g, 1, n), (av.data(), k, 1), T::one(), (db, k, 1));
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if needs(v) {
                        let d = accum(grads, g.len(), v);
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::AddRow { a, bias } => {
                if needs(*a) {
                    let d = accum(grads, g.len(), *a);
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                if needs(*bias) {
                    let n = values[bias.0].len();
                    let d = accum(grads, n, *bias);
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Mul { a, b } => {
                for (x, other) in [(*a, *b), (*b, *a)] {
                    if needs(x) {
                        let ov = values[other.0].data();
                        let d = accum(grads, g.len(), x);
                        for ((d, &g), &o) in d.iter_mut().zip(g).zip(ov) {
                            *d += g * o;
                        }
                    }
                }
            }
            Op::Scale { a, c } => {
                if needs(*a) {
                    let d = accum(grads, g.len(), *a);
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c);
                }
            }
            Op::Relu { a } => {
                if needs(*a) {
                    let xv = values[a.0].data();
                    let d = accum(grads, g.len(), *a);
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(xv) {
                        // subgradient at exactly 0 is 0
                        if x > T::zero() {
                            *d += g;
                        }
                    }
                }
            }
            Op::Silu { a } => {
                if needs(*a) {
                    let xv = values[a.0].data();
                    let d = accum(grads, g.len(), *a);
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(xv) {
                        let s = sigmoid(x);
                        *d += g * s * (T::one() + x * (T::one() - s));
                    }
                }
            }
            Op::Sum { a } => {
                if needs(*a) {
                    let n = values[a.0].len();
                    let d = accum(grads, n, *a);
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Reshape { a } => {
                if needs(*a) {
                    let d = accum(grads, g.len(), *a);
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
            }
            Op::Embedding { table, tokens } => {
                if needs(*table) {
                    let tv = &values[table.0];
                    let dim = tv.shape()[1];
                    let d = accum(grads, tv.len(), *table);
                    for (row, &t) in g.chunks(dim).zip(tokens) {
                        d[t * dim..(t + 1) * dim]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::RmsNorm { x, gamma, inv_rms } => {
                let xv = values[x.0].data();
                let gv = values[gamma.0].data();
                let mut dx = needs(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dg = needs(*gamma).then(|| vec![T::zero(); gv.len()]);
                normk::rmsnorm_backward(xv, gv, inv_rms, g, dx.as_deref_mut(), dg.as_deref_mut());
                add_into(grads, *x, dx);
                add_into(grads, *gamma, dg);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = values[x.0].data();
                let gv = values[gamma.0].data();
                let mut dx = needs(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dg = needs(*gamma).then(|| vec![T::zero(); gv.len()]);
                let mut db = beta.filter(|b| needs(*b)).map(|_| vec![T::zero(); gv.len()]);
                normk::layernorm_backward(
                    xv,
                    gv,
                    mean,
                    inv_std,
                    g,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                add_into(grads, *x, dx);
                add_into(grads, *gamma, dg);
                if let Some(b) = beta {
                    add_into(grads, *b, db);
                }
            }
            Op::Rope {
                a,
                heads,
                seq,
                cos,
                sin,
            } => {
                if needs(*a) {
                    let width = values[a.0].last_dim();
                    let mut back = vec![T::zero(); g.len()];
                    rotate(g, &mut back, width, width / heads, *seq, cos, sin, true);
                    let d = accum(grads, g.len(), *a);
                    d.iter_mut().zip(&back).for_each(|(d, &b)| *d += b);
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let width = values[q.0].last_dim();
                let (dq, dk, dv) = super::attention::backward(
                    values[q.0].data(),
                    values[k.0].data(),
                    values[v.0].data(),
                    probs,
                    g,
                    *batch,
                    *seq,
                    *heads,
                    width,
                    [needs(*q), needs(*k), needs(*v)],
                );
                add_into(grads, *q, dq);
                add_into(grads, *k, dk);
                add_into(grads, *v, dv);
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                if needs(*logits) {
                    let classes = values[logits.0].last_dim();
                    let scale = g[0] / T::from_usize(targets.len()).unwrap();
                    let d = accum(grads, probs.len(), *logits);
                    for ((d, p), &t) in d.chunks_mut(classes).zip(probs.chunks(classes)).zip(targets) {
                        for (j, (d, &p)) in d.iter_mut().zip(p).enumerate() {
                            let y = if j == t { T::one() } else { T::zero() };
                            *d += scale * (p - y);
                        }
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, delta: Option<Vec<T>>) {
    let Some(delta) = delta else { return };
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, &d)| *e += d),
        slot @ None => *slot = Some(delta),
    }
}

#[allow(clippy::too_many_arguments)]
fn rotate<T: Scalar>(
    src: &[T],
    out: &mut [T],
    width: usize,
    dh: usize,
    seq: usize,
    cos: &[T],
    sin: &[T],
    inverse: bool,
) {
    let half = dh / 2;
    for (r, (row, orow)) in src.chunks(width).zip(out.chunks_mut(width)).enumerate() {
        let p = r % seq;
        let (c, s) = (&cos[p * half..(p + 1) * half], &sin[p * half..(p + 1) * half]);
        for (head, ohead) in row.chunks(dh).zip(orow.chunks_mut(dh)) {
            for i in 0..half {
                let (x0, x1) = (head[i], head[i + half]);
                let sn = if inverse { -s[i] } else { s[i] };
                ohead[i] = x0 * c[i] - x1 * sn;
                ohead[i + half] = x0 * sn + x1 * c[i];
            }
        }
    }
}

/// Index of the single 1 in a one-hot label.
pub fn one_hot_index<T: Scalar>(label: &Tensor<T>) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in label.data().iter().enumerate() {
        if v == T::one() {
            if hot.is_some() {
                return Err(Error::NotOneHot);
            }
            hot = Some(i);
        } else if v != T::zero() {
            return Err(Error::NotOneHot);
        }
    }
    hot.ok_or(Error::NotOneHot)
}
