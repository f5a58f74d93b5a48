//! Training driver with progressive deepening.

use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EpochContext, EpochRunner, SequentialRunner, SolverConfig};
use crate::diagnostics::{self, EpochMetrics, IterationDeltas};
use crate::error::{Error, Result};
use crate::graph::{augment_features, Graph};
use crate::model::{accuracy, forward, fresh_layer, init_state, HyperParams, LayerInput, LayerShape, LayerState, ModelState};
use crate::quantization::QuantizationSet;

/// A node-classification task in training orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    /// Network input, one column per node.
    pub features: Arc<Array2<f64>>,
    pub labels: Vec<usize>,
    pub train_mask: Vec<usize>,
    pub test_mask: Vec<usize>,
    pub num_classes: usize,
}

impl Problem {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        train_mask: Vec<usize>,
        test_mask: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = features.ncols();
        if labels.len() != n {
            return Err(Error::invalid(format!("{} labels for {n} samples", labels.len())));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!("label {y} outside {num_classes} classes")));
        }
        if train_mask.is_empty() {
            return Err(Error::invalid("empty training split"));
        }
        if train_mask.iter().chain(&test_mask).any(|&i| i >= n) {
            return Err(Error::invalid("split index out of range"));
        }
        Ok(Problem { features: Arc::new(features), labels, train_mask, test_mask, num_classes })
    }

    /// Augments the graph's features with `hops` propagation steps.
    pub fn from_graph(graph: &Graph, hops: usize) -> Result<Self> {
        let aug = augment_features(graph, hops)?;
        Problem::new(
            aug.to_input(),
            graph.labels.clone(),
            graph.train_mask.clone(),
            graph.test_mask.clone(),
            graph.num_classes,
        )
    }

    pub fn input_dim(&self) -> usize {
        self.features.nrows()
    }

    pub fn samples(&self) -> usize {
        self.features.ncols()
    }

    /// Labels restricted to the training split.
    pub fn targets(&self) -> Vec<Option<usize>> {
        let mut t = vec![None; self.samples()];
        for &i in &self.train_mask {
            t[i] = Some(self.labels[i]);
        }
        t
    }

    /// `(train, test)` accuracy of a forward pass; test is NaN for an empty split.
    pub fn accuracies(&self, state: &ModelState) -> Result<(f64, f64)> {
        let logits = forward(state, &self.features.view())?;
        let train = accuracy(&logits.view(), &self.labels, &self.train_mask)?;
        let test = if self.test_mask.is_empty() {
            f64::NAN
        } else {
            accuracy(&logits.view(), &self.labels, &self.test_mask)?
        };
        Ok((train, test))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub metrics: Vec<EpochMetrics>,
}

/// Shapes of a `depth`-layer stage: the first `depth − 1` hidden layers of the
/// full model followed by the output layer.
pub fn stage_shapes(full: &[LayerShape], depth: usize) -> Result<Vec<LayerShape>> {
    if depth == 0 || depth > full.len() {
        return Err(Error::invalid(format!("stage depth {depth} outside 1..={}", full.len())));
    }
    let mut shapes = full[..depth - 1].to_vec();
    let in_dim = shapes.last().map_or(full[0].in_dim, |s| s.out_dim);
    shapes.push(LayerShape::new(in_dim, full.last().unwrap().out_dim));
    Ok(shapes)
}

/// Grows `state` to `depth` layers of `full`. New hidden layers go between
/// the existing hidden layers and the output layer and start feasible; the
/// output layer keeps its parameters when its input width is unchanged.
pub fn extend_depth(
    state: &mut ModelState,
    full: &[LayerShape],
    depth: usize,
    seed: u64,
    quantization: Option<&QuantizationSet>,
) -> Result<()> {
    let current = state.depth();
    if depth < current {
        return Err(Error::invalid("cannot shrink a model"));
    }
    if depth == current {
        return Ok(());
    }
    let target = stage_shapes(full, depth)?;
    let features = state.shared_features();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head = state.layers.pop().expect("non-empty model");
    let feed = |layers: &[LayerState]| -> LayerInput {
        match layers.last() {
            None => LayerInput::Features(Arc::clone(&features)),
            Some(prev) => {
                let mut p = prev.output.clone().expect("hidden layer has output");
                if let Some(set) = quantization {
                    set.project_in_place(&mut p);
                }
                LayerInput::Free(p)
            }
        }
    };
    for shape in &target[current - 1..depth - 1] {
        let input = feed(&state.layers);
        state.layers.push(fresh_layer(&mut rng, *shape, input, false));
    }
    let out_shape = *target.last().unwrap();
    let input = feed(&state.layers);
    if head.shape() == out_shape {
        head.input = input;
        head.preact = head.linear();
    } else {
        head = fresh_layer(&mut rng, out_shape, input, true);
    }
    state.layers.push(head);
    Ok(())
}

/// Sequential training on `problem`.
pub fn train(problem: &Problem, shapes: &[LayerShape], hyper: &HyperParams, config: &SolverConfig) -> Result<TrainOutcome> {
    train_with(problem, shapes, hyper, config, &mut SequentialRunner, &mut |_, _| {})
}

/// Trains through `runner`, calling `observer` after every epoch.
///
/// Epochs are split evenly across the schedule's stages with the remainder
/// going to the last one.
pub fn train_with(
    problem: &Problem,
    shapes: &[LayerShape],
    hyper: &HyperParams,
    config: &SolverConfig,
    runner: &mut dyn EpochRunner,
    observer: &mut dyn FnMut(&EpochMetrics, &ModelState),
) -> Result<TrainOutcome> {
    LayerShape::validate_chain(shapes)?;
    hyper.validate(shapes.len())?;
    config.validate()?;
    if shapes[0].in_dim != problem.input_dim() {
        return Err(Error::invalid(format!(
            "first layer expects {} inputs, features have {}",
            shapes[0].in_dim,
            problem.input_dim()
        )));
    }
    if shapes.last().unwrap().out_dim != problem.num_classes {
        return Err(Error::invalid("output width must equal the number of classes"));
    }
    let threshold = diagnostics::rho_threshold(hyper.nu, hyper.lipschitz);
    if hyper.rho <= threshold {
        warn!(
            "rho = {} does not exceed max(4 nu S^2, (sqrt(17)+1) nu / 2) = {threshold}; monotone descent is not guaranteed",
            hyper.rho
        );
    }
    let quant = hyper.quantization.as_ref().map(|q| q.build()).transpose()?;
    let targets = problem.targets();
    let ctx = EpochContext { hyper, config, targets: &targets, quantization: quant.as_ref() };
    let stages = hyper.stages(shapes.len());
    let per_stage = hyper.epochs / stages.len();
    let mut metrics = Vec::with_capacity(hyper.epochs);
    let mut slot: Option<ModelState> = None;

    for (s, &depth) in stages.iter().enumerate() {
        let state = match slot.take() {
            None => {
                let mut fresh = init_state(&stage_shapes(shapes, depth)?, Arc::clone(&problem.features), hyper.seed)?;
                if let Some(set) = &quant {
                    for layer in &mut fresh.layers {
                        if let Some(p) = layer.input.free_mut() {
                            set.project_in_place(p);
                        }
                    }
                }
                slot.insert(fresh)
            }
            Some(mut st) => {
                extend_depth(&mut st, shapes, depth, hyper.seed.wrapping_add(s as u64), quant.as_ref())?;
                slot.insert(st)
            }
        };
        let epochs = if s + 1 == stages.len() { hyper.epochs - per_stage * s } else { per_stage };
        info!("stage {}/{}: {depth} layers, {epochs} epochs", s + 1, stages.len());
        let mut ck: Option<f64> = None;
        for _ in 0..epochs {
            let before = state.clone();
            let start = Instant::now();
            let report = runner.run_epoch(state, &ctx)?;
            let epoch_ms = start.elapsed().as_secs_f64() * 1e3;
            let deltas = IterationDeltas::between(&before, state)?;
            let term = diagnostics::descent_term(&deltas, hyper.rho, hyper.nu, hyper.lipschitz, quant.is_none());
            ck = term.map(|t| ck.map_or(t, |c| c.min(t)));
            let residuals = diagnostics::residuals(state);
            let (train_acc, test_acc) = problem.accuracies(state)?;
            let m = EpochMetrics {
                epoch: metrics.len() + 1,
                lagrangian: diagnostics::lagrangian(state, &targets, hyper, quant.as_ref()),
                risk: diagnostics::risk(state, &targets),
                max_residual: residuals.iter().cloned().fold(0.0, f64::max),
                mean_residual: if residuals.is_empty() {
                    0.0
                } else {
                    residuals.iter().sum::<f64>() / residuals.len() as f64
                },
                descent: term,
                ck,
                train_acc,
                test_acc,
                epoch_ms,
                bytes_sent: report.bytes_sent,
            };
            observer(&m, state);
            metrics.push(m);
        }
    }
    let state = slot.expect("at least one stage");
    Ok(TrainOutcome { state, metrics })
}
