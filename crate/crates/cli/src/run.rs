use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};

use pdadmm::diagnostics::METRICS_HEADER;
use pdadmm::graph::{load_dataset, Graph, EDGES_FILE, FEATURES_FILE, LABELS_FILE, META_FILE, SPLITS_FILE};
use pdadmm::model::{read_checkpoint, write_checkpoint};
use pdadmm::parallel::{measure_speedup, ExecutorConfig, ExecutorMode, LayerParallelExecutor, SPEEDUP_HEADER};
use pdadmm::solver::{train_with, EpochRunner, Problem, SequentialRunner, SolverConfig};

use crate::config::RunConfig;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

/// A command failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration, unreadable or incompatible inputs.
    Input(anyhow::Error),
    /// The solver gave up mid-run.
    Solver(anyhow::Error),
    /// Anything else, such as an unwritable output directory.
    Other(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Solver(_) => 3,
            Failure::Other(_) => 1,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Input(e) | Failure::Solver(e) | Failure::Other(e) => e,
        }
    }
}

fn classify(e: pdadmm::error::Error) -> Failure {
    use pdadmm::error::Error;
    match e {
        Error::StepCeiling { .. } | Error::NonFinite { .. } | Error::Worker(_) => Failure::Solver(e.into()),
        other => Failure::Input(other.into()),
    }
}

fn other(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Other(e.into())
}

/// sha256 of `blob <len>\0<content>`, as git frames its objects.
fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()));
    h.update(content);
    hex::encode(h.finalize())
}

/// Hash over sorted `name hash` lines, like a git tree.
fn tree_hash(entries: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (name, hash) in entries {
        h.update(format!("{name} {hash}\n"));
    }
    hex::encode(h.finalize())
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a RunConfig,
    /// Content hashes of the dataset files and the resolved config.
    inputs: BTreeMap<String, String>,
    input_hash: String,
    metrics: &'static str,
    checkpoint: &'static str,
    epochs_completed: usize,
    train_acc: Option<f64>,
    test_acc: Option<f64>,
    version: &'static str,
}

fn load_problem(dataset: &Path, hops: usize) -> Result<(Graph, Problem), Failure> {
    let graph = load_dataset(dataset).map_err(|e| Failure::Input(e.into()))?;
    let problem = Problem::from_graph(&graph, hops).map_err(classify)?;
    Ok((graph, problem))
}

pub fn train(cfg: &RunConfig) -> Result<(), Failure> {
    let (graph, problem) = load_problem(cfg.dataset(), cfg.hops)?;
    info!("{} nodes, {} input features, {} classes", graph.num_nodes, problem.input_dim(), problem.num_classes);
    let shapes = cfg.shapes(problem.input_dim(), problem.num_classes);
    let hyper = cfg.hyper();

    let mut inputs = BTreeMap::new();
    for name in [META_FILE, FEATURES_FILE, EDGES_FILE, LABELS_FILE, SPLITS_FILE] {
        let path = cfg.dataset().join(name);
        let bytes = fs::read(&path).with_context(|| format!("cannot read {}", path.display())).map_err(Failure::Input)?;
        inputs.insert(format!("dataset/{name}"), blob_hash(&bytes));
    }
    let config_json = serde_json::to_vec(cfg).map_err(other)?;
    inputs.insert("config.json".into(), blob_hash(&config_json));

    fs::create_dir_all(&cfg.output).with_context(|| format!("cannot create {}", cfg.output.display())).map_err(Failure::Other)?;

    let mut runner: Box<dyn EpochRunner> = if cfg.workers > 1 {
        Box::new(LayerParallelExecutor::new(ExecutorConfig::new(cfg.workers, ExecutorMode::Parallel)).map_err(classify)?)
    } else {
        Box::new(SequentialRunner)
    };
    let mut rows = vec![METRICS_HEADER.to_string()];
    let mut last_acc = None;
    let result = train_with(&problem, &shapes, &hyper, &SolverConfig::default(), runner.as_mut(), &mut |m, _| {
        rows.push(m.csv_row(cfg.record_timing));
        last_acc = Some((m.train_acc, m.test_acc));
        info!("epoch {}: L = {:.6e}, train {:.3}", m.epoch, m.lagrangian, m.train_acc);
    });
    // metrics are kept even when the run aborts
    let mut text = rows.join("\n");
    text.push('\n');
    let metrics_path = cfg.output.join(METRICS_FILE);
    fs::write(&metrics_path, text).with_context(|| format!("cannot write {}", metrics_path.display())).map_err(Failure::Other)?;
    let outcome = result.map_err(classify)?;

    write_checkpoint(&outcome.state, cfg.output.join(CHECKPOINT_FILE)).map_err(other)?;
    let manifest = Manifest {
        config: cfg,
        input_hash: tree_hash(&inputs),
        inputs,
        metrics: METRICS_FILE,
        checkpoint: CHECKPOINT_FILE,
        epochs_completed: outcome.metrics.len(),
        train_acc: last_acc.map(|a| a.0),
        test_acc: last_acc.map(|a| a.1).filter(|v| !v.is_nan()),
        version: env!("CARGO_PKG_VERSION"),
    };
    let mut json = serde_json::to_string_pretty(&manifest).map_err(other)?;
    json.push('\n');
    fs::write(cfg.output.join(MANIFEST_FILE), json).map_err(other)?;
    Ok(())
}

fn format_acc(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v:.2}")
    }
}

/// Accuracies of a checkpoint on a dataset. The hop count is recovered from
/// the input width of the first layer.
pub fn eval(checkpoint: &Path, dataset: &Path) -> Result<String, Failure> {
    let state = read_checkpoint(checkpoint).map_err(|e| Failure::Input(e.into()))?;
    let graph = load_dataset(dataset).map_err(|e| Failure::Input(e.into()))?;
    let in_dim = state.shapes()[0].in_dim;
    if graph.num_features == 0 || in_dim % graph.num_features != 0 {
        return Err(Failure::Input(anyhow!(
            "checkpoint expects {in_dim} inputs, not a multiple of the dataset's {} features",
            graph.num_features
        )));
    }
    let hops = in_dim / graph.num_features;
    let classes = state.shapes().last().map_or(0, |s| s.out_dim);
    if classes != graph.num_classes {
        return Err(Failure::Input(anyhow!("checkpoint has {classes} outputs, dataset {} classes", graph.num_classes)));
    }
    let problem = Problem::from_graph(&graph, hops).map_err(classify)?;
    let (train, test) = problem.accuracies(&state).map_err(classify)?;
    Ok(format!("train_acc {}\ntest_acc {}\n", format_acc(train), format_acc(test)))
}

/// Speedup CSV for each worker count.
pub fn benchmark(cfg: &RunConfig, workers: &[usize], timed: usize) -> Result<String, Failure> {
    if workers.is_empty() || workers.iter().any(|&w| w == 0 || w > cfg.layers) {
        return Err(Failure::Input(anyhow!("worker counts must lie in 1..={}", cfg.layers)));
    }
    if timed == 0 {
        return Err(Failure::Input(anyhow!("at least one timed epoch is needed")));
    }
    let (_, problem) = load_problem(cfg.dataset(), cfg.hops)?;
    let shapes = cfg.shapes(problem.input_dim(), problem.num_classes);
    let rows = measure_speedup(&problem, &shapes, &cfg.hyper(), &SolverConfig::default(), workers, timed).map_err(classify)?;
    let mut out = Vec::new();
    writeln!(out, "{SPEEDUP_HEADER}").map_err(other)?;
    for row in rows {
        writeln!(out, "{}", row.csv_row()).map_err(other)?;
    }
    String::from_utf8(out).map_err(other)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
