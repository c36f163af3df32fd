#![allow(dead_code)]

use normlab::autodiff::relative_error;
use normlab::{fd_gradient, Tape64, Tensor64, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-6;

pub type Build = fn(&mut Tape64, &[Var], &mut ChaCha8Rng) -> normlab::Result<Var>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    let n = shape.iter().product();
    Tensor64::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Differentiable op under test: how to draw inputs and how to apply it.
pub struct OpSpec {
    pub name: &'static str,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor64>,
    /// Builds the op; may draw op-level constants (tokens, targets) from the rng.
    pub build: Build,
}

/// `sum(w * op(inputs))` with fixed random `w`, so every output entry matters.
fn weighted_loss(spec: &OpSpec, inputs: &[Tensor64], seed: u64) -> (Tape64, Var, Vec<Var>) {
    let mut tape = Tape64::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let mut r = rng(seed);
    let out = (spec.build)(&mut tape, &vars, &mut r).unwrap();
    let w = randn(&mut r, tape.shape(out));
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    (tape, loss, vars)
}

/// Worst relative error between autodiff and central differences over every input.
pub fn op_error(spec: &OpSpec, seed: u64) -> f64 {
    let inputs = (spec.inputs)(&mut rng(seed));
    let op_seed = seed.wrapping_mul(7919).wrapping_add(1);
    let (mut tape, loss, vars) = weighted_loss(spec, &inputs, op_seed);
    tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad_or_zeros(*v);
        let fd = fd_gradient(
            |t| {
                let mut probe = inputs.clone();
                probe[k] = t.clone();
                let (tp, l, _) = weighted_loss(spec, &probe, op_seed);
                tp.value(l).data()[0]
            },
            &inputs[k],
            FD_STEP,
        )
        .unwrap();
        worst = worst.max(relative_error(&analytic, fd.data()));
    }
    worst
}

const B: usize = 2;
const S: usize = 3;
const H: usize = 2;
const DH: usize = 4;

pub fn op_suite() -> Vec<OpSpec> {
    vec![
        OpSpec {
            name: "matmul",
            inputs: |r| vec![randn(r, &[2, 3, 4]), randn(r, &[4, 5])],
            build: |t, v, _| t.matmul(v[0], v[1]),
        },
        OpSpec {
            name: "matmul_nt",
            inputs: |r| vec![randn(r, &[3, 4]), randn(r, &[5, 4])],
            build: |t, v, _| t.matmul_nt(v[0], v[1]),
        },
        OpSpec {
            name: "add",
            inputs: |r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])],
            build: |t, v, _| t.add(v[0], v[1]),
        },
        OpSpec {
            name: "add_row",
            inputs: |r| vec![randn(r, &[3, 4]), randn(r, &[4])],
            build: |t, v, _| t.add_row(v[0], v[1]),
        },
        OpSpec {
            name: "mul",
            inputs: |r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])],
            build: |t, v, _| t.mul(v[0], v[1]),
        },
        OpSpec {
            name: "scale",
            inputs: |r| vec![randn(r, &[3, 4])],
            build: |t, v, r| Ok(t.scale(v[0], r.sample::<f64, _>(StandardNormal))),
        },
        OpSpec {
            name: "relu",
            inputs: |r| vec![randn(r, &[3, 4])],
            build: |t, v, _| Ok(t.relu(v[0])),
        },
        OpSpec {
            name: "silu",
            inputs: |r| vec![randn(r, &[3, 4])],
            build: |t, v, _| Ok(t.silu(v[0])),
        },
        OpSpec {
            name: "sum",
            inputs: |r| vec![randn(r, &[3, 4])],
            build: |t, v, _| Ok(t.sum(v[0])),
        },
        OpSpec {
            name: "reshape",
            inputs: |r| vec![randn(r, &[3, 4])],
            build: |t, v, _| t.reshape(v[0], &[2, 6]),
        },
        OpSpec {
            name: "embedding",
            inputs: |r| vec![randn(r, &[7, 4])],
            build: |t, v, r| {
                let tokens: Vec<usize> = (0..5).map(|_| r.random_range(0..7)).collect();
                t.embedding(v[0], &tokens)
            },
        },
        OpSpec {
            name: "rmsnorm",
            inputs: |r| vec![randn(r, &[3, 6]), randn(r, &[6])],
            build: |t, v, _| t.rmsnorm(v[0], v[1], 1e-6),
        },
        OpSpec {
            name: "layernorm",
            inputs: |r| vec![randn(r, &[3, 6]), randn(r, &[6]), randn(r, &[6])],
            build: |t, v, _| t.layernorm(v[0], v[1], Some(v[2]), 1e-6),
        },
        OpSpec {
            name: "rope",
            inputs: |r| vec![randn(r, &[B * S, H * DH])],
            build: |t, v, _| t.rope(v[0], H, S, 10_000.0),
        },
        OpSpec {
            name: "causal_attention",
            inputs: |r| {
                vec![
                    randn(r, &[B * S, H * DH]),
                    randn(r, &[B * S, H * DH]),
                    randn(r, &[B * S, H * DH]),
                ]
            },
            build: |t, v, _| t.causal_attention(v[0], v[1], v[2], B, S, H),
        },
        OpSpec {
            name: "softmax_xent",
            inputs: |r| vec![randn(r, &[4, 5])],
            build: |t, v, r| {
                let targets: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
                t.softmax_xent(v[0], &targets)
            },
        },
    ]
}
