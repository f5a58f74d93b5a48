use std::sync::Arc;

use pdadmm::model::{init_state, HyperParams, LayerShape, ModelState};
use pdadmm::parallel::{
    measure_speedup, ChannelKind, ExecutorConfig, ExecutorMode, FaultInjection, FaultKind, LayerParallelExecutor,
};
use pdadmm::quantization::{QuantizationSet, QuantizationSpec, HEADER_BYTES};
use pdadmm::solver::{run_epoch, EpochContext, EpochRunner, Phase, Problem, SolverConfig};
use pdadmm::synthetic::dense_problem;

fn setup(depth: usize) -> (Problem, Vec<LayerShape>, HyperParams) {
    let problem = dense_problem(40, 6, 3, 12).unwrap();
    let shapes = LayerShape::chain(6, 10, 3, depth);
    (problem, shapes, HyperParams { rho: 1.0, nu: 0.1, seed: 12, ..HyperParams::default() })
}

fn start(problem: &Problem, shapes: &[LayerShape], set: Option<&QuantizationSet>) -> ModelState {
    let mut s = init_state(shapes, Arc::clone(&problem.features), 12).unwrap();
    if let Some(set) = set {
        for layer in &mut s.layers {
            if let Some(p) = layer.input.free_mut() {
                set.project_in_place(p);
            }
        }
    }
    s
}

fn compare(depth: usize, workers: usize, mode: ExecutorMode, quantized: bool) {
    let (problem, shapes, mut hp) = setup(depth);
    if quantized {
        hp.quantization = Some(QuantizationSpec::default());
    }
    let set = hp.quantization.map(|q| q.build().unwrap());
    let cfg = SolverConfig::default();
    let targets = problem.targets();
    let ctx = EpochContext { hyper: &hp, config: &cfg, targets: &targets, quantization: set.as_ref() };
    let mut seq = start(&problem, &shapes, set.as_ref());
    let mut par = seq.clone();
    let mut exec = LayerParallelExecutor::new(ExecutorConfig::new(workers, mode)).unwrap();
    for _ in 0..5 {
        run_epoch(&mut seq, &ctx).unwrap();
        exec.run_epoch(&mut par, &ctx).unwrap();
    }
    assert_eq!(seq.state_hash(), par.state_hash(), "depth {depth}, {workers} workers, {mode:?}, quantized {quantized}");
}

#[test]
fn matches_sequential_for_every_partition() {
    for depth in [1, 2, 5] {
        for workers in 1..=depth {
            compare(depth, workers, ExecutorMode::Parallel, false);
        }
    }
}

#[test]
fn sequential_mode_matches_too() {
    compare(4, 3, ExecutorMode::Sequential, false);
    compare(4, 2, ExecutorMode::Sequential, true);
}

#[test]
fn quantized_matches_sequential() {
    compare(5, 5, ExecutorMode::Parallel, true);
    compare(6, 4, ExecutorMode::Parallel, true);
}

#[test]
fn too_many_workers_rejected() {
    let (problem, shapes, hp) = setup(3);
    let cfg = SolverConfig::default();
    let targets = problem.targets();
    let ctx = EpochContext { hyper: &hp, config: &cfg, targets: &targets, quantization: None };
    let mut s = start(&problem, &shapes, None);
    let mut exec = LayerParallelExecutor::new(ExecutorConfig::new(4, ExecutorMode::Parallel)).unwrap();
    assert!(exec.run_epoch(&mut s, &ctx).is_err());
    assert!(LayerParallelExecutor::new(ExecutorConfig::new(0, ExecutorMode::Parallel)).is_err());
}

#[test]
fn failures_roll_back_the_epoch() {
    let (problem, shapes, hp) = setup(5);
    let cfg = SolverConfig::default();
    let targets = problem.targets();
    let ctx = EpochContext { hyper: &hp, config: &cfg, targets: &targets, quantization: None };
    for kind in [FaultKind::Error, FaultKind::Panic] {
        for phase in [Phase::Input, Phase::Preact, Phase::Dual] {
            let mut s = start(&problem, &shapes, None);
            let mut exec = LayerParallelExecutor::new(ExecutorConfig::new(3, ExecutorMode::Parallel)).unwrap();
            exec.run_epoch(&mut s, &ctx).unwrap();
            let before = s.state_hash();
            exec.set_fault(Some(FaultInjection { phase, layer: 4, kind }));
            assert!(exec.run_epoch(&mut s, &ctx).is_err(), "{kind:?} at {}", phase.name());
            assert_eq!(s.state_hash(), before);
            assert_eq!(s.depth(), 5);
            exec.set_fault(None);
            exec.run_epoch(&mut s, &ctx).unwrap();
        }
    }
}

#[test]
fn ledger_agrees_with_channel_counters() {
    let (problem, shapes, hp) = setup(6);
    let cfg = SolverConfig::default();
    let targets = problem.targets();
    let ctx = EpochContext { hyper: &hp, config: &cfg, targets: &targets, quantization: None };
    let mut s = start(&problem, &shapes, None);
    let mut exec = LayerParallelExecutor::new(ExecutorConfig::new(3, ExecutorMode::Parallel)).unwrap();
    let report = exec.run_epoch(&mut s, &ctx).unwrap();
    let ledger = exec.ledger();
    assert_eq!(report.bytes_sent, exec.channel_bytes());
    assert_eq!(ledger.total_bytes(), exec.channel_bytes());
    // two block boundaries: one p message back, q and u forward
    let (p, c) = (ledger.totals(ChannelKind::Input), ledger.totals(ChannelKind::Coupling));
    assert_eq!((p.messages, c.messages), (2, 4));
    assert_eq!(p.payload_bytes, p.entries * 8);
    assert_eq!(c.bytes, c.payload_bytes + c.messages * HEADER_BYTES as u64);
    assert!(ledger.channels().keys().all(|k| k.from.abs_diff(k.to) == 1));

    let mut single = LayerParallelExecutor::new(ExecutorConfig::new(1, ExecutorMode::Parallel)).unwrap();
    assert_eq!(single.run_epoch(&mut s, &ctx).unwrap().bytes_sent, 0);
}

#[test]
fn quantized_inputs_travel_at_four_bits() {
    let (problem, shapes, mut hp) = setup(4);
    hp.quantization = Some(QuantizationSpec { levels: 16, lo: -1.0, hi: 1.0 });
    let set = hp.quantization.unwrap().build().unwrap();
    let cfg = SolverConfig::default();
    let targets = problem.targets();
    let ctx = EpochContext { hyper: &hp, config: &cfg, targets: &targets, quantization: Some(&set) };
    let mut s = start(&problem, &shapes, Some(&set));
    let mut exec = LayerParallelExecutor::new(ExecutorConfig::new(4, ExecutorMode::Parallel)).unwrap();
    exec.run_epoch(&mut s, &ctx).unwrap();
    let p = exec.ledger().totals(ChannelKind::Input);
    assert_eq!(p.messages, 3);
    assert_eq!(p.payload_bytes * 8, p.entries * 4);
}

#[test]
fn speedup_table_has_one_row_per_worker_count() {
    let (problem, shapes, hp) = setup(4);
    let rows = measure_speedup(&problem, &shapes, &hp, &SolverConfig::default(), &[1, 2, 4], 2).unwrap();
    assert_eq!(rows.iter().map(|r| r.workers).collect::<Vec<_>>(), vec![1, 2, 4]);
    assert!(rows.iter().all(|r| r.epoch_ms > 0.0 && r.speedup > 0.0 && r.layers == 4 && r.neurons == 10));
}
