//! Fused causal attention kernels, one `seq x seq` score block per (batch, head).

use crate::scalar::Scalar;

type Grads<T> = (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>);

pub(super) fn forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    batch: usize,
    seq: usize,
    heads: usize,
    width: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = width / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let block = seq * seq;
    let mut out = vec![T::zero(); q.len()];
    let mut probs = vec![T::zero(); batch * heads * block];
    for b in 0..batch {
        for h in 0..heads {
            let off = b * seq * width + h * dh;
            let p = &mut probs[(b * heads + h) * block..][..block];
            T::gemm(
                seq,
                dh,
                seq,
                scale,
                (&q[off..], width, 1),
                (&k[off..], 1, width),
                T::zero(),
                (p, seq, 1),
            );
            for (i, row) in p.chunks_mut(seq).enumerate() {
                let (live, masked) = row.split_at_mut(i + 1);
                let max = live.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for s in live.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                live.iter_mut().for_each(|s| *s /= z);
                masked.iter_mut().for_each(|s| *s = T::zero());
            }
            T::gemm(
                seq,
                seq,
                dh,
                T::one(),
                (p, seq, 1),
                (&v[off..], width, 1),
                T::zero(),
                (&mut out[off..], width, 1),
            );
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &[T],
    batch: usize,
    seq: usize,
    heads: usize,
    width: usize,
    needs: [bool; 3],
) -> Grads<T> {
    let dh = width / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let block = seq * seq;
    let mut dq = needs[0].then(|| vec![T::zero(); q.len()]);
    let mut dk = needs[1].then(|| vec![T::zero(); k.len()]);
    let mut dv = needs[2].then(|| vec![T::zero(); v.len()]);
    let mut ds = vec![T::zero(); block];
    for b in 0..batch {
        for h in 0..heads {
            let off = b * seq * width + h * dh;
            let p = &probs[(b * heads + h) * block..][..block];
            if let Some(dv) = dv.as_mut() {
                T::gemm(
                    seq,
                    seq,
                    dh,
                    T::one(),
                    (p, 1, seq),
                    (&g[off..], width, 1),
                    T::one(),
                    (&mut dv[off..], width, 1),
                );
            }
            if dq.is_none() && dk.is_none() {
                continue;
            }
            // dP = dO V^T, then the softmax Jacobian row by row
            T::gemm(
                seq,
                dh,
                seq,
                T::one(),
                (&g[off..], width, 1),
                (&v[off..], 1, width),
                T::zero(),
                (&mut ds, seq, 1),
            );
            for (prow, drow) in p.chunks(seq).zip(ds.chunks_mut(seq)) {
                let dot: T = prow.iter().zip(drow.iter()).map(|(&p, &d)| p * d).sum();
                for (d, &p) in drow.iter_mut().zip(prow) {
                    *d = p * (*d - dot);
                }
            }
            if let Some(dq) = dq.as_mut() {
                T::gemm(
                    seq,
                    seq,
                    dh,
                    scale,
                    (&ds, seq, 1),
                    (&k[off..], width, 1),
                    T::one(),
                    (&mut dq[off..], width, 1),
                );
            }
            if let Some(dk) = dk.as_mut() {
                T::gemm(
                    seq,
                    seq,
                    dh,
                    scale,
                    (&ds, 1, seq),
                    (&q[off..], width, 1),
                    T::one(),
                    (&mut dk[off..], width, 1),
                );
            }
        }
    }
    (dq, dk, dv)
}
