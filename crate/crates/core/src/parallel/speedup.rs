use std::time::Instant;

use super::{ExecutorConfig, ExecutorMode, LayerParallelExecutor};
use crate::error::Result;
use crate::model::{init_state, HyperParams, LayerShape, ModelState};
use crate::solver::{EpochContext, EpochRunner, Problem, SequentialRunner, SolverConfig};

pub const SPEEDUP_HEADER: &str = "workers,layers,neurons,epoch_ms,speedup";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedupRow {
    pub workers: usize,
    pub layers: usize,
    pub neurons: usize,
    /// Mean wall time of a timed epoch with this many workers.
    pub epoch_ms: f64,
    /// Sequential epoch time divided by `epoch_ms`.
    pub speedup: f64,
}

impl SpeedupRow {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.workers, self.layers, self.neurons, self.epoch_ms, self.speedup)
    }
}

/// One warm-up epoch, then the mean wall time in milliseconds of `timed` epochs.
pub fn time_epochs(
    runner: &mut dyn EpochRunner,
    state: &mut ModelState,
    ctx: &EpochContext<'_>,
    timed: usize,
) -> Result<f64> {
    runner.run_epoch(state, ctx)?;
    let start = Instant::now();
    for _ in 0..timed {
        runner.run_epoch(state, ctx)?;
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / timed.max(1) as f64)
}

/// Per-epoch time of the layer-parallel executor for each worker count,
/// relative to the sequential runner on the same fresh model.
pub fn measure_speedup(
    problem: &Problem,
    shapes: &[LayerShape],
    hyper: &HyperParams,
    config: &SolverConfig,
    worker_counts: &[usize],
    timed: usize,
) -> Result<Vec<SpeedupRow>> {
    let quant = hyper.quantization.as_ref().map(|q| q.build()).transpose()?;
    let targets = problem.targets();
    let ctx = EpochContext { hyper, config, targets: &targets, quantization: quant.as_ref() };
    let fresh = || -> Result<ModelState> {
        let mut s = init_state(shapes, problem.features.clone(), hyper.seed)?;
        if let Some(set) = &quant {
            for layer in &mut s.layers {
                if let Some(p) = layer.input.free_mut() {
                    set.project_in_place(p);
                }
            }
        }
        Ok(s)
    };
    let sequential = time_epochs(&mut SequentialRunner, &mut fresh()?, &ctx, timed)?;
    let neurons = shapes.first().map_or(0, |s| s.out_dim);
    let mut rows = Vec::with_capacity(worker_counts.len());
    for &workers in worker_counts {
        let mut exec = LayerParallelExecutor::new(ExecutorConfig::new(workers, ExecutorMode::Parallel))?;
        let ms = time_epochs(&mut exec, &mut fresh()?, &ctx, timed)?;
        rows.push(SpeedupRow { workers, layers: shapes.len(), neurons, epoch_ms: ms, speedup: sequential / ms });
    }
    Ok(rows)
}
