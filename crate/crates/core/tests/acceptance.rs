//! Acceptance criteria, one PASS/FAIL line each.
//!
//! The training criteria (6 to 9) run at the `reduced` profile unless
//! `NORMLAB_ACCEPTANCE_PROFILE=desk` selects the full desk preset. Thresholds
//! are the same for both.

mod common;

use std::time::Instant;

use normlab::experiment::{run_train, ExperimentSpec, OutputFormat};
use normlab::instrument::{angular_distance, growth_shape, hidden_stats, GrowthShape, LayerSnapshot};
use normlab::model::{swiglu_width, PlacementStrategy, TransformerConfig};
use normlab::norm::{jacobian_norm_bound, rmsnorm_jacobian, spectral_norm};
use normlab::theory::{fd_check, preln_block, proposition_report, Block, ReportOptions, TheoryCase};
use normlab::trainer::{lr_sweep, Corpus, SweepCell, SweepTable, TrainConfig};
use normlab::{init_parameters, Tape64, Tensor64};
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const PROBE_SEQUENCES: usize = 64;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

struct Profile {
    name: &'static str,
    model: TransformerConfig,
    train: TrainConfig,
    lrs: Vec<f64>,
}

fn profile() -> Profile {
    let desk = std::env::var("NORMLAB_ACCEPTANCE_PROFILE").is_ok_and(|p| p == "desk");
    if desk {
        return Profile {
            name: "desk",
            model: TransformerConfig::desk(),
            train: TrainConfig::desk(1e-3),
            lrs: vec![1e-3, 3e-3],
        };
    }
    let mut model = TransformerConfig::desk();
    model.d_model = 64;
    model.n_heads = 2;
    model.d_head = 32;
    model.d_ff = swiglu_width(64);
    model.seq_len = 64;
    let mut train = TrainConfig::desk(1e-3);
    train.seq_len = 64;
    train.batch_size = 8;
    Profile {
        name: "reduced",
        model,
        train,
        lrs: vec![1e-3, 3e-3],
    }
}

// 1. Autodiff of every op and theory block against finite differences.
fn gradient_oracle() -> Outcome {
    let mut worst = (0.0f64, "");
    let mut cases = 0;
    for op in common::op_suite() {
        for seed in 0..100 {
            let e = common::op_error(&op, seed);
            cases += 1;
            if e.is_nan() || e > worst.0 {
                worst = (e, op.name);
            }
        }
    }
    for block in Block::ALL {
        for seed in 0..100 {
            let case = TheoryCase::random(&mut common::rng(10_000 + seed), 8, 16);
            let e = fd_check(&case, block, common::FD_STEP).unwrap();
            cases += 1;
            if e.is_nan() || e > worst.0 {
                worst = (e, block.label());
            }
        }
    }
    outcome(
        worst.0 < 1e-6,
        format!(
            "{cases} cases, worst relative error {:.2e} ({}) < 1e-6",
            worst.0, worst.1
        ),
    )
}

// 2. Pre-LN gradient identity.
fn preln_identity() -> Outcome {
    let worst = (0..50)
        .map(|s| {
            preln_block(&TheoryCase::random(&mut common::rng(20_000 + s), 8, 16))
                .unwrap()
                .max_abs_error
        })
        .fold(0.0, f64::max);
    outcome(worst < 1e-10, format!("50 cases, max abs error {worst:.2e} < 1e-10"))
}

// 3. Peri-LN and Post-LN entrywise bounds.
fn gradient_bounds() -> Outcome {
    let report = proposition_report(&ReportOptions {
        n_cases: 1000,
        dim: 8,
        hidden: 32,
        scales: vec![1.0, 10.0, 100.0, 1000.0, 10_000.0],
        seed: 3,
        bound_scale: 1.0,
    })
    .unwrap();
    let count = |b: Block| -> (usize, usize) {
        report
            .rows
            .iter()
            .filter(|r| r.block == b)
            .fold((0, 0), |(c, v), r| (c + r.cases, v + r.violations))
    };
    let (peri_cases, peri_v) = count(Block::PeriLn);
    let (post_cases, post_v) = count(Block::PostLn);
    let usage = report.rows.iter().filter_map(|r| r.max_bound_usage).fold(0.0, f64::max);
    outcome(
        peri_v == 0 && post_v == 0 && peri_cases == 5000 && post_cases == 5000,
        format!(
            "peri {peri_v} violations / {peri_cases}, post {post_v} / {post_cases} (scales 1..1e4), max entry/bound {usage:.3}"
        ),
    )
}

// 4. RMSNorm Jacobian closed form against autodiff, and its norm bound.
fn rmsnorm_jacobian_check() -> Outcome {
    let mut r = common::rng(4);
    let (mut worst, mut bound_fail, mut trials) = (0.0f64, 0usize, 0usize);
    for d in [2usize, 4, 8, 16] {
        for _ in 0..100 {
            let a = common::randn(&mut r, &[1, d]);
            let gamma: f64 = r.random_range(0.1..3.0);
            let eps = 1e-6;
            let closed = rmsnorm_jacobian(a.data(), gamma, eps);
            for row in 0..d {
                let mut tape = Tape64::new();
                let x = tape.param(a.clone());
                let g = tape.constant(Tensor64::full(vec![d], gamma));
                let y = tape.rmsnorm(x, g, eps).unwrap();
                let mut seed = vec![0.0; d];
                seed[row] = 1.0;
                let s = tape.constant(Tensor64::new(vec![1, d], seed).unwrap());
                let p = tape.mul(y, s).unwrap();
                let l = tape.sum(p);
                tape.backward(l).unwrap();
                let grad = tape.grad_or_zeros(x);
                for (c, v) in grad.iter().enumerate() {
                    worst = worst.max((v - closed[row * d + c]).abs());
                }
            }
            let spectral = spectral_norm(&closed, d, d);
            if spectral > jacobian_norm_bound(a.data(), gamma).unwrap() {
                bound_fail += 1;
            }
            trials += 1;
        }
    }
    outcome(
        worst < 1e-8 && bound_fail == 0,
        format!(
            "{trials} trials over D in {{2,4,8,16}}: max abs error {worst:.2e} < 1e-8, {bound_fail} bound failures"
        ),
    )
}

struct InitStats {
    shapes: Vec<(PlacementStrategy, Vec<GrowthShape>)>,
    angular: Vec<(PlacementStrategy, Vec<f64>)>,
}

fn init_stats() -> InitStats {
    let cfg = TransformerConfig::desk();
    let probe = Corpus::bundled().probe_batch(PROBE_SEQUENCES, cfg.seq_len).unwrap();
    let mut shapes = Vec::new();
    let mut angular = Vec::new();
    for s in [
        PlacementStrategy::post_ln(),
        PlacementStrategy::pre_ln(),
        PlacementStrategy::peri_ln(),
    ] {
        let mut sh = Vec::new();
        let mut an = Vec::new();
        for seed in SEEDS {
            let m = init_parameters::<f32>(&cfg, &s, seed).unwrap();
            let snaps = hidden_stats(&m, &probe, 0).unwrap();
            let var: Vec<f64> = snaps.iter().map(|x| x.hidden_variance).collect();
            sh.push(growth_shape(&var).unwrap().shape);
            an.push(snaps.iter().map(|x| x.angular_distance).sum::<f64>() / snaps.len() as f64);
        }
        shapes.push((s, sh));
        angular.push((s, an));
    }
    InitStats { shapes, angular }
}

// 5. Variance growth shapes at initialization on the desk preset.
fn init_shapes(stats: &InitStats) -> Outcome {
    let want = |s: &PlacementStrategy| match s.kind {
        normlab::PlacementKind::PostLn => GrowthShape::Constant,
        _ => GrowthShape::Linear,
    };
    let ok = stats.shapes.iter().all(|(s, sh)| sh.iter().all(|x| *x == want(s)));
    let detail = stats
        .shapes
        .iter()
        .map(|(s, sh)| {
            format!(
                "{}: {}",
                s.label(),
                sh.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("/")
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    outcome(ok, format!("desk preset, 3 seeds: {detail}"))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// The per-seed cells of `strategy` at `lr`, in seed order.
fn seed_cells<'a>(t: &'a SweepTable, s: &'a PlacementStrategy, lr: f64) -> Vec<&'a SweepCell> {
    let mut cells: Vec<&SweepCell> = t.cells_for(s, lr).collect();
    cells.sort_by_key(|c| c.seed);
    cells
}

fn last_layers(c: &SweepCell) -> Option<&[LayerSnapshot]> {
    (!c.final_layers.is_empty()).then_some(c.final_layers.as_slice())
}

struct Strategies {
    pre: PlacementStrategy,
    peri: PlacementStrategy,
    post: PlacementStrategy,
    frozen: PlacementStrategy,
}

fn strategies() -> Strategies {
    Strategies {
        pre: PlacementStrategy::pre_ln(),
        peri: PlacementStrategy::peri_ln(),
        post: PlacementStrategy::post_ln(),
        frozen: PlacementStrategy::peri_ln().with_frozen_output_ln(true),
    }
}

fn best(t: &SweepTable, s: &PlacementStrategy) -> Result<f64, Outcome> {
    t.best_lr(s)
        .map(|b| b.0)
        .ok_or_else(|| outcome(false, format!("{} diverged at every learning rate", s.label())))
}

// 6. Trained variance: Pre-LN last-layer variance far above Peri-LN's, with superlinear growth.
fn trained_variance(t: &SweepTable) -> Outcome {
    let st = strategies();
    let (pre_lr, peri_lr) = match (best(t, &st.pre), best(t, &st.peri)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return e,
    };
    let var_last = |c: &SweepCell| last_layers(c).map(|l| l.last().unwrap().hidden_variance);
    let shape = |c: &SweepCell| {
        last_layers(c).map(|l| {
            growth_shape(&l.iter().map(|x| x.hidden_variance).collect::<Vec<_>>())
                .unwrap()
                .shape
        })
    };
    let pre = seed_cells(t, &st.pre, pre_lr);
    let peri = seed_cells(t, &st.peri, peri_lr);
    let pre_var: Vec<f64> = pre.iter().filter_map(|c| var_last(c)).collect();
    let peri_var: Vec<f64> = peri.iter().filter_map(|c| var_last(c)).collect();
    let ratio = median(pre_var.clone()) / median(peri_var.clone());
    let pre_super = pre
        .iter()
        .filter(|c| shape(c) == Some(GrowthShape::Superlinear))
        .count();
    let peri_tame = peri
        .iter()
        .filter(|c| matches!(shape(c), Some(GrowthShape::Linear | GrowthShape::Constant)))
        .count();
    let shapes = |cells: &[&SweepCell]| {
        cells
            .iter()
            .map(|c| shape(c).map_or("-".into(), |s| s.to_string()))
            .collect::<Vec<_>>()
            .join("/")
    };
    outcome(
        ratio >= 5.0 && pre_super >= 2 && peri_tame >= 2,
        format!(
            "median last-layer variance pre {:.3} (lr {pre_lr}) / peri {:.3} (lr {peri_lr}) = {ratio:.3} (need >= 5); pre shapes {} (need superlinear >= 2), peri shapes {} (need linear/constant >= 2)",
            median(pre_var),
            median(peri_var),
            shapes(&pre),
            shapes(&peri)
        ),
    )
}

fn grad_spread(c: &SweepCell) -> Option<f64> {
    let l = last_layers(c)?;
    let g: Vec<f64> = l.iter().map(|x| x.grad_norm.unwrap()).collect();
    Some(g.iter().copied().fold(0.0, f64::max) / g.iter().copied().fold(f64::INFINITY, f64::min))
}

// 7. Layer-wise gradient spread: Peri-LN more uniform than Post-LN.
fn gradient_uniformity(t: &SweepTable) -> Outcome {
    let st = strategies();
    let (peri_lr, post_lr) = match (best(t, &st.peri), best(t, &st.post)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return e,
    };
    let peri: Vec<Option<f64>> = seed_cells(t, &st.peri, peri_lr)
        .iter()
        .map(|c| grad_spread(c))
        .collect();
    let post: Vec<Option<f64>> = seed_cells(t, &st.post, post_lr)
        .iter()
        .map(|c| grad_spread(c))
        .collect();
    let wins = peri
        .iter()
        .zip(&post)
        .filter(|(a, b)| matches!((a, b), (Some(a), Some(b)) if a < b))
        .count();
    let fmt = |v: &[Option<f64>]| {
        v.iter()
            .map(|x| x.map_or("-".into(), |x| format!("{x:.2}")))
            .collect::<Vec<_>>()
            .join("/")
    };
    outcome(
        wins >= 2,
        format!(
            "max/min layer grad norm, peri {} vs post {}: peri smaller in {wins}/3 seeds (need >= 2)",
            fmt(&peri),
            fmt(&post)
        ),
    )
}

// 8. Gradient spikes at the shared best learning rate.
fn gradient_spikes(t: &SweepTable) -> Outcome {
    let st = strategies();
    let Some(lr) = t.shared_best_lr(&[st.pre, st.peri]) else {
        return outcome(false, "no learning rate where both pre_ln and peri_ln converged".into());
    };
    let pre: Vec<usize> = seed_cells(t, &st.pre, lr).iter().map(|c| c.spikes).collect();
    let peri: Vec<usize> = seed_cells(t, &st.peri, lr).iter().map(|c| c.spikes).collect();
    let wins = peri.iter().zip(&pre).filter(|(a, b)| a <= b).count();
    outcome(
        wins >= 2,
        format!("shared lr {lr}: spikes peri {peri:?} vs pre {pre:?}; peri <= pre in {wins}/3 seeds (need >= 2)"),
    )
}

// 9. Frozen output-norm gamma costs little.
fn frozen_gamma(t: &SweepTable) -> Outcome {
    let st = strategies();
    let lrs = (best(t, &st.frozen), best(t, &st.peri), best(t, &st.pre));
    let (frozen_lr, peri_lr, pre_lr) = match lrs {
        (Ok(a), Ok(b), Ok(c)) => (a, b, c),
        (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => return e,
    };
    let frozen = t.median_loss(&st.frozen, frozen_lr).unwrap();
    let peri = t.median_loss(&st.peri, peri_lr).unwrap();
    let pre = t.median_loss(&st.pre, pre_lr).unwrap();
    let gap = (frozen - peri).abs() / peri;
    outcome(
        gap <= 0.05 && frozen < pre,
        format!(
            "median final loss frozen {frozen:.4} vs learnable {peri:.4} (gap {:.2}% <= 5%), vs pre_ln {pre:.4} (need frozen < pre)",
            100.0 * gap
        ),
    )
}

// 10. Reruns reproduce metrics byte for byte.
fn determinism(p: &Profile) -> Outcome {
    let mut spec = ExperimentSpec::desk(PlacementStrategy::peri_ln(), 3e-3);
    spec.model = p.model;
    spec.train = p.train.with_lr(3e-3).with_steps(60).with_seed(7);
    spec.probes.steps = vec![0, 60];
    spec.probes.batch_size = 8;
    let dir = tempfile::tempdir().unwrap();
    let read = |sub: &str| {
        let out = dir.path().join(sub);
        run_train(&spec, &out, OutputFormat::Csv).unwrap();
        (
            std::fs::read(out.join("metrics.csv")).unwrap(),
            std::fs::read(out.join("layers.csv")).unwrap(),
            std::fs::read(out.join("checkpoint.nlckpt")).unwrap(),
        )
    };
    let (a, b) = (read("a"), read("b"));
    outcome(
        a == b,
        format!(
            "two runs of one spec: metrics.csv {} bytes, layers.csv and checkpoint identical: {}",
            a.0.len(),
            a == b
        ),
    )
}

// 11. Angular distance reference values and the init ordering.
fn angular(stats: &InitStats) -> Outcome {
    let x = Tensor64::from_rows(&[&[0.3, -1.2, 2.0], &[1.0, 0.5, -0.25]]).unwrap();
    let neg = Tensor64::from_rows(&[&[-0.3, 1.2, -2.0], &[-1.0, -0.5, 0.25]]).unwrap();
    let orth = Tensor64::from_rows(&[&[1.2, 0.3, 0.0], &[0.5, -1.0, 0.0]]).unwrap();
    let same = angular_distance(&x, &x).unwrap().mean;
    let opposite = angular_distance(&x, &neg).unwrap().mean;
    let right = angular_distance(&x, &orth).unwrap().mean;
    let exact = same.abs() < 1e-12 && (opposite - 1.0).abs() < 1e-12 && (right - 0.5).abs() < 1e-12;
    let get = |k: normlab::PlacementKind| &stats.angular.iter().find(|(s, _)| s.kind == k).unwrap().1;
    let post = get(normlab::PlacementKind::PostLn);
    let pre = get(normlab::PlacementKind::PreLn);
    let ordered = post.iter().zip(pre).all(|(a, b)| a < b);
    outcome(
        exact && ordered,
        format!(
            "identity {same:.1e}, negation {opposite}, orthogonal {right}; init mean angular post {} < pre {}",
            post.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join("/"),
            pre.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join("/")
        ),
    )
}

fn main() {
    let p = profile();
    println!(
        "acceptance profile `{}`: {} layers, d_model {}, seq {}, batch {}, {} steps, lrs {:?}, seeds {:?}",
        p.name,
        p.model.n_layers,
        p.model.d_model,
        p.train.seq_len,
        p.train.batch_size,
        p.train.total_steps,
        p.lrs,
        SEEDS
    );
    let mut failed = 0;
    let mut report = |id: u32, name: &str, start: Instant, o: Outcome| {
        if !o.passed {
            failed += 1;
        }
        println!(
            "[{}] {id:>2} {name}: {} ({:.1}s)",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    };

    let t = Instant::now();
    report(1, "gradient oracle", t, gradient_oracle());
    let t = Instant::now();
    report(2, "pre-ln gradient identity", t, preln_identity());
    let t = Instant::now();
    report(3, "peri/post-ln gradient bounds", t, gradient_bounds());
    let t = Instant::now();
    report(4, "rmsnorm jacobian", t, rmsnorm_jacobian_check());
    let t = Instant::now();
    let stats = init_stats();
    report(5, "init variance shapes", t, init_shapes(&stats));

    let t = Instant::now();
    let st = strategies();
    let corpus = Corpus::bundled();
    let probe = corpus.probe_batch(PROBE_SEQUENCES, p.train.seq_len).unwrap();
    let table = lr_sweep::<f32>(
        &p.model,
        &[st.pre, st.peri, st.post, st.frozen],
        &p.lrs,
        &p.train,
        &SEEDS,
        &corpus,
        Some(&probe),
    )
    .unwrap();
    println!(
        "     sweep of {} runs finished in {:.1}s",
        table.cells.len(),
        t.elapsed().as_secs_f64()
    );
    for line in table.summary_csv().lines() {
        println!("     {line}");
    }
    let t = Instant::now();
    report(6, "trained variance divergence", t, trained_variance(&table));
    report(7, "layer-wise gradient uniformity", t, gradient_uniformity(&table));
    report(8, "gradient spikes", t, gradient_spikes(&table));
    report(9, "frozen-gamma ablation", t, frozen_gamma(&table));
    let t = Instant::now();
    report(10, "determinism", t, determinism(&p));
    let t = Instant::now();
    report(11, "angular distance", t, angular(&stats));

    println!("{failed} of 11 criteria failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
