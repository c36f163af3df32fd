//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation in the order it is executed. Each
//! recorded node owns its forward value; [`Tape::backward`] walks the nodes in
//! exact reverse recording order and accumulates gradients into the inputs.
//! Tapes are rebuilt for every forward pass and never shared across threads.

mod attention;
mod fd;
mod ops;

pub use fd::{fd_gradient, max_relative_error, relative_error, FD_ABS_FLOOR};
pub use ops::one_hot_index;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulNt {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    Relu {
        a: Var,
    },
    Silu {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Embedding {
        table: Var,
        tokens: Vec<usize>,
    },
    RmsNorm {
        x: Var,
        gamma: Var,
        inv_rms: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Option<Var>,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Rope {
        a: Var,
        heads: usize,
        seq: usize,
        cos: Vec<T>,
        sin: Vec<T>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

/// Recording of one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
    ops: Vec<Op<T>>,
    needs_grad: Vec<bool>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Records a differentiable leaf (a parameter or an input under test).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    /// Gradient accumulated into `v` by the last backward pass, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v`, or zeros when nothing reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<T> {
        self.grad(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); self.values[v.0].len()])
    }

    /// Clears every gradient so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    /// Seeds `d loss / d loss = 1` and propagates to every reachable node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.values[loss.0].shape();
        if self.values[loss.0].len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.backward_done = true;
        if !self.needs_grad[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn add_node_passes_unit_gradient_to_both_inputs() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[1], &[2.0]));
        let b = tape.param(t(&[1], &[-3.0]));
        let c = tape.add(a, b).unwrap();
        tape.backward(c).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(a), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn double_backward_needs_reset() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(a);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::BackwardTwice)));
        let first = tape.grad_or_zeros(a);
        tape.reset_grads();
        tape.backward(s).unwrap();
        assert_eq!(first, tape.grad_or_zeros(a));
    }

    #[test]
    fn disconnected_parameter_keeps_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(a);
        tape.backward(s).unwrap();
        assert!(tape.grad(unused).is_none());
        assert_eq!(tape.grad_or_zeros(unused), vec![0.0; 3]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(a, c).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }
}
