//! Gradient-free, layer-parallel training of graph-augmented MLPs.
//!
//! A GA-MLP feeds multi-hop propagated node features into a plain ReLU
//! network. Training splits every layer boundary into an input copy and an
//! output copy coupled by a dual variable, so each layer's subproblem can be
//! solved independently within a phase:
//!
//! - [`graph`] loads datasets and builds the augmented input features.
//! - [`model`] holds the per-layer ADMM variables, inference and checkpoints.
//! - [`solver`] implements the subproblem updates and the epoch loop.
//! - [`quantization`] restricts layer inputs to a finite level set and packs
//!   them for the wire.
//! - [`parallel`] runs the phases across layer-owning workers.
//! - [`diagnostics`] evaluates the augmented Lagrangian and convergence metrics.

pub mod diagnostics;
pub mod error;
pub mod graph;
pub mod model;
pub mod parallel;
pub mod quantization;
pub mod solver;
pub mod synthetic;

pub use error::{Error, Result};

pub mod prelude {
    pub use crate::diagnostics::{EpochMetrics, lagrangian, residuals};
    pub use crate::error::{Error, Result};
    pub use crate::graph::{AugmentedFeatures, Graph};
    pub use crate::model::{HyperParams, LayerShape, ModelState};
    pub use crate::parallel::{ExecutorConfig, ExecutorMode, LayerParallelExecutor};
    pub use crate::quantization::QuantizationSet;
    pub use crate::solver::{EpochContext, EpochRunner, Mode, SequentialRunner, SolverConfig};
}
