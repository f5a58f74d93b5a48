//! Acceptance checks, one line per criterion. Exits nonzero if any fails.
//!
//! Criterion 8 reads a Cora dataset directory (see `graph::load_dataset`)
//! from `PDADMM_CORA_DIR`, falling back to `data/cora` at the workspace root.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pdadmm::diagnostics::{check_dual_identity, lagrangian, rho_threshold};
use pdadmm::graph::load_dataset;
use pdadmm::model::{init_state, HyperParams, LayerShape, ModelState};
use pdadmm::parallel::{measure_speedup, ChannelKind, ExecutorConfig, ExecutorMode, LayerParallelExecutor};
use pdadmm::quantization::{make_uniform_levels, QuantizationSet, QuantizationSpec};
use pdadmm::solver::fista::{column_gradient, column_objective};
use pdadmm::solver::phi::{eval_phi, grad_bias, grad_input, grad_weight, weight_objective, Coupling, PhiInputs};
use pdadmm::solver::updates::{
    majorizer, q_subproblem_grad, update_p, update_q, update_w, z_hidden_objective, z_hidden_scalar,
};
use pdadmm::solver::{train_with, EpochContext, EpochRunner, Problem, SequentialRunner, SolverConfig, TrainOutcome};
use pdadmm::synthetic::{blobs, dense_problem};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// A training run of criterion 1 plus what the later criteria need from it.
struct DescentRun {
    label: &'static str,
    initial: f64,
    outcome: TrainOutcome,
    worst_dual: f64,
    seconds: f64,
}

fn blob_problem() -> Problem {
    let graph = blobs(200, 3, 8, 4.0, 7).expect("blob graph");
    Problem::from_graph(&graph, 2).expect("blob problem")
}

fn blob_hyper(quantized: bool) -> HyperParams {
    HyperParams {
        rho: 1.0,
        nu: 0.1,
        hops: 2,
        epochs: 300,
        quantization: quantized.then(QuantizationSpec::default),
        seed: 11,
        ..HyperParams::default()
    }
}

fn initial_state(problem: &Problem, shapes: &[LayerShape], hp: &HyperParams, quant: Option<&QuantizationSet>) -> ModelState {
    let mut s = init_state(shapes, Arc::clone(&problem.features), hp.seed).expect("init");
    if let Some(set) = quant {
        for layer in &mut s.layers {
            if let Some(p) = layer.input.free_mut() {
                set.project_in_place(p);
            }
        }
    }
    s
}

fn descent_run(quantized: bool) -> DescentRun {
    let problem = blob_problem();
    let shapes = LayerShape::chain(problem.input_dim(), 16, 3, 3);
    let hp = blob_hyper(quantized);
    let quant = hp.quantization.map(|q| q.build().expect("levels"));
    let initial = lagrangian(&initial_state(&problem, &shapes, &hp, quant.as_ref()), &problem.targets(), &hp, quant.as_ref());
    let mut worst_dual = 0.0f64;
    let start = Instant::now();
    let outcome = train_with(
        &problem,
        &shapes,
        &hp,
        &SolverConfig::default(),
        &mut SequentialRunner,
        &mut |_, state| worst_dual = worst_dual.max(check_dual_identity(state, hp.nu)),
    )
    .expect("training");
    DescentRun {
        label: if quantized { "pdADMM-Q" } else { "pdADMM" },
        initial,
        outcome,
        worst_dual,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn lagrangians(run: &DescentRun) -> Vec<f64> {
    std::iter::once(run.initial).chain(run.outcome.metrics.iter().map(|m| m.lagrangian)).collect()
}

fn criterion_1(runs: &[DescentRun]) -> Outcome {
    let threshold = rho_threshold(0.1, 1.0);
    let mut parts = vec![format!("threshold {threshold:.4}")];
    let mut ok = 1.0 > threshold;
    for run in runs {
        let ls = lagrangians(run);
        let worst = ls.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        let pass = ls.len() == 301 && ls.iter().all(|v| v.is_finite()) && worst <= 1e-8 && run.seconds < 30.0;
        ok &= pass;
        parts.push(format!(
            "{}: L {:.4} -> {:.4}, largest increase {worst:.3e}, {:.1}s",
            run.label,
            ls[0],
            ls[ls.len() - 1],
            run.seconds
        ));
    }
    ensure(ok, parts.join("; "))
}

fn criterion_2(runs: &[DescentRun]) -> Outcome {
    let worst = runs.iter().map(|r| r.worst_dual).fold(0.0, f64::max);
    ensure(worst <= 1e-8, format!("max |u - nu(q - f(z))| over all epochs {worst:.3e}"))
}

fn rand_matrix(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.random_range(-scale..scale))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut fails = Vec::new();

    let grid: Vec<f64> = (0..=200_000).map(|i| -10.0 + i as f64 * 1e-4).collect();
    let mut z_gap = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let (a, c, d) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let nu = rng.random_range(0.01..10.0);
        let best = grid.iter().map(|&z| z_hidden_objective(z, a, c, d, nu)).fold(f64::INFINITY, f64::min);
        z_gap = z_gap.max(z_hidden_objective(z_hidden_scalar(a, c, d), a, c, d, nu) - best);
    }
    if z_gap > 1e-6 {
        fails.push(format!("z-hidden exceeds grid minimum by {z_gap:.3e}"));
    }

    let mut q_grad = 0.0f64;
    for _ in 0..1000 {
        let s = |rng: &mut ChaCha8Rng| Array2::from_elem((1, 1), rng.random_range(-5.0..5.0));
        let (f, u, p) = (s(&mut rng).mapv(|v: f64| v.max(0.0)), s(&mut rng), s(&mut rng));
        let (nu, rho) = (rng.random_range(0.01..10.0), rng.random_range(0.01..10.0));
        let q = update_q(&f.view(), &u.view(), &p.view(), nu, rho);
        let g = q_subproblem_grad(&q.view(), &f.view(), &u.view(), &p.view(), nu, rho);
        q_grad = q_grad.max(g[[0, 0]].abs());
    }
    if q_grad > 1e-10 {
        fails.push(format!("q gradient {q_grad:.3e}"));
    }

    let mut proj_mismatch = 0usize;
    for _ in 0..1000 {
        let m = rng.random_range(2..=32usize);
        let lo = rng.random_range(-3.0..0.0);
        let hi = lo + rng.random_range(0.1..4.0);
        let set = make_uniform_levels(lo, hi, m).expect("levels");
        let v = if rng.random_bool(0.2) {
            // exact midpoint between neighbours
            let i = rng.random_range(0..m - 1);
            (set.levels()[i] + set.levels()[i + 1]) / 2.0
        } else {
            rng.random_range(lo - 1.0..hi + 1.0)
        };
        let mut best = set.levels()[0];
        for &level in set.levels() {
            if (v - level).abs() < (v - best).abs() {
                best = level;
            }
        }
        if set.nearest(v) != best {
            proj_mismatch += 1;
        }
    }
    if proj_mismatch > 0 {
        fails.push(format!("{proj_mismatch} projections differ from exhaustive search"));
    }

    let cfg = SolverConfig::default();
    let mut violations = 0usize;
    for _ in 0..1000 {
        let (w, b) = (rand_matrix(&mut rng, (3, 2), 2.0), rand_matrix(&mut rng, (3, 1), 1.0).column(0).to_owned());
        let (z, p) = (rand_matrix(&mut rng, (3, 4), 3.0), rand_matrix(&mut rng, (2, 4), 2.0));
        let (q, u) = (rand_matrix(&mut rng, (2, 4), 2.0), rand_matrix(&mut rng, (2, 4), 1.0));
        let (rho, nu, l2) = (rng.random_range(0.01..5.0), rng.random_range(0.01..5.0), rng.random_range(0.0..0.5));
        let inputs = PhiInputs {
            weight: w.view(),
            bias: b.view(),
            preact: z.view(),
            coupling: Some(Coupling { output: q.view(), dual: u.view() }),
            rho,
            nu,
        };
        let prev = rng.random_range(1e-6..10.0);
        let step = update_p(&inputs, &p.view(), prev, &cfg, 2).expect("p step");
        let g = grad_input(&inputs, &p.view());
        let bound = majorizer(eval_phi(&inputs, &p.view()), &g, &p.view(), &step.value.view(), step.curvature);
        if eval_phi(&inputs, &step.value.view()) > bound {
            violations += 1;
        }
        let step = update_w(&inputs, &p.view(), l2, prev, &cfg, 2).expect("W step");
        let g = grad_weight(&inputs, &p.view(), l2);
        let fx = weight_objective(&inputs, &p.view(), l2);
        let bound = majorizer(fx, &g, &w.view(), &step.value.view(), step.curvature);
        if weight_objective(&inputs.with_weight(step.value.view()), &p.view(), l2) > bound {
            violations += 1;
        }
    }
    if violations > 0 {
        fails.push(format!("{violations} accepted steps above their majorizer"));
    }

    let secs = start.elapsed().as_secs_f64();
    if secs >= 10.0 {
        fails.push(format!("took {secs:.1}s"));
    }
    if fails.is_empty() {
        Ok(format!("z gap {z_gap:.2e}, q gradient {q_grad:.2e}, projections exact, steps majorized, {secs:.1}s"))
    } else {
        Err(fails.join("; "))
    }
}

/// Central differences of `f` at `x`, one entry at a time.
fn finite_difference(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let h = 1e-5;
    let mut g = Array2::zeros(x.dim());
    for idx in ndarray::indices(x.dim()) {
        let mut plus = x.clone();
        plus[idx] += h;
        let mut minus = x.clone();
        minus[idx] -= h;
        g[idx] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    g
}

fn relative_error(analytic: &ArrayView2<'_, f64>, numeric: &Array2<f64>) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = [0.0f64; 4];
    for _ in 0..100 {
        let w = rand_matrix(&mut rng, (3, 2), 2.0);
        let b = rand_matrix(&mut rng, (3, 1), 1.0);
        let (z, p) = (rand_matrix(&mut rng, (3, 2), 3.0), rand_matrix(&mut rng, (2, 2), 2.0));
        let (q, u) = (rand_matrix(&mut rng, (2, 2), 2.0), rand_matrix(&mut rng, (2, 2), 1.0));
        let (rho, nu, l2) = (rng.random_range(0.1..5.0), rng.random_range(0.1..5.0), rng.random_range(0.0..0.5));
        let bias = b.column(0).to_owned();
        let inputs = PhiInputs {
            weight: w.view(),
            bias: bias.view(),
            preact: z.view(),
            coupling: Some(Coupling { output: q.view(), dual: u.view() }),
            rho,
            nu,
        };

        let fd = finite_difference(&p, |x| eval_phi(&inputs, &x.view()));
        worst[0] = worst[0].max(relative_error(&grad_input(&inputs, &p.view()).view(), &fd));

        let fd = finite_difference(&w, |x| weight_objective(&inputs.with_weight(x.view()), &p.view(), l2));
        worst[1] = worst[1].max(relative_error(&grad_weight(&inputs, &p.view(), l2).view(), &fd));

        let fd = finite_difference(&b, |x| {
            let col: Array1<f64> = x.column(0).to_owned();
            eval_phi(&inputs.with_bias(col.view()), &p.view())
        });
        let gb = grad_bias(&inputs, &p.view()).insert_axis(ndarray::Axis(1));
        worst[2] = worst[2].max(relative_error(&gb.view(), &fd));

        // output pre-activations: 3 classes, 2 samples
        let a = rand_matrix(&mut rng, (3, 2), 3.0);
        let labels = [rng.random_range(0..3usize), rng.random_range(0..3usize)];
        let objective = |x: &Array2<f64>| -> f64 {
            (0..2)
                .map(|j| column_objective(&x.column(j).to_vec(), &a.column(j).to_vec(), labels[j], nu))
                .sum()
        };
        let mut analytic = Array2::zeros((3, 2));
        for j in 0..2 {
            let g = column_gradient(&z.column(j).to_vec(), &a.column(j).to_vec(), labels[j], nu);
            analytic.column_mut(j).iter_mut().zip(g).for_each(|(o, v)| *o = v);
        }
        worst[3] = worst[3].max(relative_error(&analytic.view(), &finite_difference(&z, objective)));
    }
    let detail = format!(
        "relative errors p {:.2e}, W {:.2e}, b {:.2e}, z_L {:.2e}",
        worst[0], worst[1], worst[2], worst[3]
    );
    ensure(worst.iter().all(|&e| e <= 1e-5), detail)
}

fn criterion_5() -> Outcome {
    let problem = dense_problem(120, 32, 4, 5).expect("problem");
    let shapes = LayerShape::chain(32, 64, 4, 10);
    let hp = HyperParams { rho: 1.0, nu: 0.1, epochs: 5, seed: 5, ..HyperParams::default() };
    let cfg = SolverConfig::default();
    let targets = problem.targets();
    let ctx = EpochContext { hyper: &hp, config: &cfg, targets: &targets, quantization: None };
    let mut sequential = init_state(&shapes, Arc::clone(&problem.features), hp.seed).expect("init");
    let mut parallel = sequential.clone();
    let mut exec = LayerParallelExecutor::new(ExecutorConfig::new(4, ExecutorMode::Parallel)).map_err(|e| e.to_string())?;
    for _ in 0..hp.epochs {
        SequentialRunner.run_epoch(&mut sequential, &ctx).map_err(|e| e.to_string())?;
        exec.run_epoch(&mut parallel, &ctx).map_err(|e| e.to_string())?;
    }
    let (h1, h2) = (sequential.state_hash(), parallel.state_hash());
    ensure(h1 == h2, format!("sequential {} vs 4 workers {}", &h1[..16], &h2[..16]))
}

fn criterion_6() -> Outcome {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    if cores < 4 {
        return Err(format!("{cores} core(s) available, at least 4 required"));
    }
    let start = Instant::now();
    let workers = cores.min(10);
    let problem = dense_problem(100, 64, 4, 6).expect("problem");
    let hp = HyperParams { rho: 1.0, nu: 0.1, seed: 6, ..HyperParams::default() };
    let mut speedups = Vec::new();
    for neurons in [500usize, 1000, 2000] {
        let shapes = LayerShape::chain(64, neurons, 4, 10);
        let rows = measure_speedup(&problem, &shapes, &hp, &SolverConfig::default(), &[workers], 3)
            .map_err(|e| e.to_string())?;
        speedups.push(rows[0].speedup);
    }
    let steps_up = speedups.windows(2).filter(|w| w[1] >= w[0]).count();
    let secs = start.elapsed().as_secs_f64();
    ensure(
        speedups[2] > 1.3 && steps_up >= 1 && secs < 300.0,
        format!(
            "{workers} workers, speedup {:.2} / {:.2} / {:.2} at 500 / 1000 / 2000 neurons, {secs:.0}s",
            speedups[0], speedups[1], speedups[2]
        ),
    )
}

fn criterion_7() -> Outcome {
    let problem = dense_problem(64, 16, 4, 7).expect("problem");
    let shapes = LayerShape::chain(16, 24, 4, 6);
    let hp = HyperParams {
        rho: 1.0,
        nu: 0.1,
        quantization: Some(QuantizationSpec { levels: 16, lo: -1.0, hi: 1.0 }),
        seed: 7,
        ..HyperParams::default()
    };
    let cfg = SolverConfig::default();
    let set = hp.quantization.unwrap().build().map_err(|e| e.to_string())?;
    let targets = problem.targets();
    let ctx = EpochContext { hyper: &hp, config: &cfg, targets: &targets, quantization: Some(&set) };
    let mut state = initial_state(&problem, &shapes, &hp, Some(&set));
    let mut exec = LayerParallelExecutor::new(ExecutorConfig::new(3, ExecutorMode::Parallel)).map_err(|e| e.to_string())?;
    let report = exec.run_epoch(&mut state, &ctx).map_err(|e| e.to_string())?;
    let p = exec.ledger().totals(ChannelKind::Input);
    let full = p.entries * 32 / 8;
    let ok = p.messages > 0 && p.payload_bytes * 8 == full && report.bytes_sent == exec.channel_bytes();
    ensure(
        ok,
        format!(
            "{} p messages, {} entries, payload {} B vs 32-bit {} B, sent {} B",
            p.messages, p.entries, p.payload_bytes, full, report.bytes_sent
        ),
    )
}

fn cora_dir() -> PathBuf {
    std::env::var_os("PDADMM_CORA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/cora"))
}

fn criterion_8() -> Outcome {
    let dir = cora_dir();
    let graph = load_dataset(&dir).map_err(|e| format!("Cora dataset unavailable at {}: {e}", dir.display()))?;
    let start = Instant::now();
    let problem = Problem::from_graph(&graph, 3).map_err(|e| e.to_string())?;
    let shapes = LayerShape::chain(problem.input_dim(), 256, problem.num_classes, 4);
    let hp = HyperParams { rho: 1e-3, nu: 1e-3, hops: 3, epochs: 400, schedule: vec![2, 4], seed: 8, ..HyperParams::default() };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(4);
    let mut exec =
        LayerParallelExecutor::new(ExecutorConfig::new(workers, ExecutorMode::Parallel)).map_err(|e| e.to_string())?;
    let out = train_with(&problem, &shapes, &hp, &SolverConfig::default(), &mut exec, &mut |_, _| {})
        .map_err(|e| e.to_string())?;
    let last = out.metrics.last().ok_or("no epochs ran")?;
    let secs = start.elapsed().as_secs_f64();
    ensure(
        last.train_acc >= 0.90 && last.test_acc >= 0.65 && secs < 600.0,
        format!("train {:.3}, test {:.3}, {secs:.0}s", last.train_acc, last.test_acc),
    )
}

fn criterion_9(runs: &[DescentRun]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for run in runs {
        let ck: Option<Vec<f64>> = run.outcome.metrics.iter().map(|m| m.ck).collect();
        let Some(ck) = ck else {
            ok = false;
            parts.push(format!("{}: c_k undefined", run.label));
            continue;
        };
        let ls = lagrangians(run);
        let min_l = ls.iter().cloned().fold(f64::INFINITY, f64::min);
        let monotone = ck.windows(2).all(|w| w[1] <= w[0]);
        let sum: f64 = ck.iter().sum();
        let bound = ls[0] - min_l + 1e-6;
        let (k50, kend) = (50.0 * ck[49], ck.len() as f64 * ck[ck.len() - 1]);
        let pass = monotone && sum <= bound && kend < k50;
        ok &= pass;
        parts.push(format!(
            "{}: monotone {monotone}, sum {sum:.3} <= {bound:.3}, k*c_k {k50:.3e} at 50 vs {kend:.3e} at {}",
            run.label,
            ck.len()
        ));
    }
    ensure(ok, parts.join("; "))
}

fn main() -> ExitCode {
    let runs = [descent_run(false), descent_run(true)];
    let checks: [(usize, Box<dyn FnOnce() -> Outcome>); 9] = [
        (1, Box::new(|| criterion_1(&runs))),
        (2, Box::new(|| criterion_2(&runs))),
        (3, Box::new(criterion_3)),
        (4, Box::new(criterion_4)),
        (5, Box::new(criterion_5)),
        (6, Box::new(criterion_6)),
        (7, Box::new(criterion_7)),
        (8, Box::new(criterion_8)),
        (9, Box::new(|| criterion_9(&runs))),
    ];
    let mut failed = 0;
    for (n, check) in checks {
        match check() {
            Ok(detail) => println!("PASS criterion {n}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n}: {detail}");
            }
        }
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
