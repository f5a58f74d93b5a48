//! GA-MLP variable state for ADMM training.
//!
//! Samples are stored as columns. Layer `l` maps its input copy
//! (`n_{l-1} × N`) through `weight` and `bias` to `preact`; every layer but the
//! last also keeps an output copy and the dual variable coupling that output
//! to the next layer's input.

mod checkpoint;

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::quantization::QuantizationSpec;

/// Dimensions of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LayerShape {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        LayerShape { in_dim, out_dim }
    }

    /// `input → hidden → … → hidden → classes` with `depth` layers.
    pub fn chain(input: usize, hidden: usize, classes: usize, depth: usize) -> Vec<LayerShape> {
        assert!(depth >= 1);
        (0..depth)
            .map(|l| {
                let in_dim = if l == 0 { input } else { hidden };
                let out_dim = if l + 1 == depth { classes } else { hidden };
                LayerShape::new(in_dim, out_dim)
            })
            .collect()
    }

    pub fn validate_chain(shapes: &[LayerShape]) -> Result<()> {
        if shapes.is_empty() {
            return Err(Error::invalid("model needs at least one layer"));
        }
        for (l, s) in shapes.iter().enumerate() {
            if s.in_dim == 0 || s.out_dim == 0 {
                return Err(Error::invalid(format!("layer {} has a zero dimension", l + 1)));
            }
            if l > 0 && shapes[l - 1].out_dim != s.in_dim {
                return Err(Error::invalid(format!(
                    "layer {} expects {} inputs but layer {} produces {}",
                    l + 1,
                    s.in_dim,
                    l,
                    shapes[l - 1].out_dim
                )));
            }
        }
        Ok(())
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Dual penalty on the input/output consensus.
    pub rho: f64,
    /// Weight of the relaxed layer constraints.
    pub nu: f64,
    pub hops: usize,
    pub epochs: usize,
    /// Lipschitz constant of the activation (1 for ReLU).
    pub lipschitz: f64,
    /// Layer counts for progressive deepening; the last entry is the full depth.
    pub schedule: Vec<usize>,
    /// Coefficient of the `½‖W‖²` weight regularizer.
    pub l2: f64,
    pub quantization: Option<QuantizationSpec>,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            rho: 1e-3,
            nu: 1e-3,
            hops: 2,
            epochs: 100,
            lipschitz: 1.0,
            schedule: Vec::new(),
            l2: 0.0,
            quantization: None,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) || !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::invalid("rho and nu must be positive and finite"));
        }
        if self.l2 < 0.0 {
            return Err(Error::invalid("l2 coefficient must be non-negative"));
        }
        if self.hops == 0 {
            return Err(Error::invalid("hop count must be at least 1"));
        }
        if !self.schedule.is_empty() {
            if self.schedule.windows(2).any(|w| w[0] >= w[1]) || self.schedule[0] == 0 {
                return Err(Error::invalid("schedule must be strictly increasing and positive"));
            }
            if *self.schedule.last().unwrap() != depth {
                return Err(Error::invalid(format!(
                    "schedule must end at the model depth {depth}"
                )));
            }
        }
        if let Some(q) = &self.quantization {
            q.build()?;
        }
        Ok(())
    }

    /// The schedule, or the single stage `[depth]` when none is configured.
    pub fn stages(&self, depth: usize) -> Vec<usize> {
        if self.schedule.is_empty() {
            vec![depth]
        } else {
            self.schedule.clone()
        }
    }
}

/// Input copy of a layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerInput {
    /// The augmented features; shared and never updated.
    Features(Arc<Array2<f64>>),
    /// A trainable copy of the previous layer's output.
    Free(Array2<f64>),
}

impl LayerInput {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        match self {
            LayerInput::Features(x) => x.view(),
            LayerInput::Free(x) => x.view(),
        }
    }

    pub fn free_mut(&mut self) -> Option<&mut Array2<f64>> {
        match self {
            LayerInput::Features(_) => None,
            LayerInput::Free(x) => Some(x),
        }
    }

    pub fn is_free(&self) -> bool {
        matches!(self, LayerInput::Free(_))
    }
}

/// ADMM variables owned by one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    /// Auxiliary copy of the linear map `W p + b`.
    pub preact: Array2<f64>,
    pub input: LayerInput,
    /// Output copy, present on every layer but the last.
    pub output: Option<Array2<f64>>,
    /// Dual variable of the output/next-input consensus.
    pub dual: Option<Array2<f64>>,
    /// Curvature parameter of the last input step.
    pub input_step: f64,
    /// Curvature parameter of the last weight step.
    pub weight_step: f64,
}

impl LayerState {
    pub fn shape(&self) -> LayerShape {
        LayerShape::new(self.weight.ncols(), self.weight.nrows())
    }

    pub fn samples(&self) -> usize {
        self.preact.ncols()
    }

    pub fn is_output(&self) -> bool {
        self.output.is_none()
    }

    /// `W p + b 1ᵀ` with the current input.
    pub fn linear(&self) -> Array2<f64> {
        affine(&self.weight, &self.bias, &self.input.view())
    }

    fn arrays(&self) -> impl Iterator<Item = &Array2<f64>> {
        let input = match &self.input {
            LayerInput::Features(x) => &**x,
            LayerInput::Free(x) => x,
        };
        [Some(&self.weight), Some(&self.preact), Some(input)]
            .into_iter()
            .chain([self.output.as_ref(), self.dual.as_ref()])
            .flatten()
    }

    pub fn is_finite(&self) -> bool {
        self.bias.iter().all(|v| v.is_finite())
            && self.arrays().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

/// `W p + b 1ᵀ`.
pub fn affine(weight: &Array2<f64>, bias: &Array1<f64>, input: &ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = weight.dot(input);
    out += &bias.view().insert_axis(Axis(1));
    out
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Full training state of a GA-MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub layers: Vec<LayerState>,
}

impl ModelState {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn samples(&self) -> usize {
        self.layers[0].samples()
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.layers.iter().map(LayerState::shape).collect()
    }

    /// The network input (augmented features, feature-by-node).
    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.layers[0].input.view()
    }

    pub fn shared_features(&self) -> Arc<Array2<f64>> {
        match &self.layers[0].input {
            LayerInput::Features(x) => Arc::clone(x),
            LayerInput::Free(x) => Arc::new(x.clone()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(LayerState::is_finite)
    }

    /// SHA-256 over every variable's bit pattern, in layer order.
    pub fn state_hash(&self) -> String {
        let mut h = Sha256::new();
        for layer in &self.layers {
            h.update(layer.input_step.to_bits().to_le_bytes());
            h.update(layer.weight_step.to_bits().to_le_bytes());
            for v in &layer.bias {
                h.update(v.to_bits().to_le_bytes());
            }
            for a in layer.arrays() {
                h.update((a.nrows() as u64).to_le_bytes());
                h.update((a.ncols() as u64).to_le_bytes());
                for v in a {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

pub(crate) fn glorot(rng: &mut ChaCha8Rng, shape: LayerShape) -> Array2<f64> {
    let limit = (6.0 / (shape.in_dim + shape.out_dim) as f64).sqrt();
    Array2::from_shape_fn((shape.out_dim, shape.in_dim), |_| rng.random_range(-limit..=limit))
}

/// Builds a fresh layer fed by `input`, initialized feasibly: `z = W p + b`,
/// `q = relu(z)` and a zero dual.
pub(crate) fn fresh_layer(
    rng: &mut ChaCha8Rng,
    shape: LayerShape,
    input: LayerInput,
    is_output: bool,
) -> LayerState {
    let weight = glorot(rng, shape);
    let bias = Array1::zeros(shape.out_dim);
    let preact = affine(&weight, &bias, &input.view());
    let (output, dual) = if is_output {
        (None, None)
    } else {
        let q = relu(&preact);
        let u = Array2::zeros(q.raw_dim());
        (Some(q), Some(u))
    };
    LayerState {
        weight,
        bias,
        preact,
        input,
        output,
        dual,
        input_step: 1.0,
        weight_step: 1.0,
    }
}

/// Glorot-uniform weights, zero biases, and a forward sweep that makes every
/// consensus residual and dual variable zero.
pub fn init_state(shapes: &[LayerShape], features: Arc<Array2<f64>>, seed: u64) -> Result<ModelState> {
    LayerShape::validate_chain(shapes)?;
    if features.nrows() != shapes[0].in_dim {
        return Err(Error::invalid(format!(
            "features have {} rows, first layer expects {}",
            features.nrows(),
            shapes[0].in_dim
        )));
    }
    if features.ncols() == 0 {
        return Err(Error::invalid("no samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = shapes.len();
    let mut layers: Vec<LayerState> = Vec::with_capacity(depth);
    for (l, &shape) in shapes.iter().enumerate() {
        let input = match layers.last() {
            None => LayerInput::Features(Arc::clone(&features)),
            Some(prev) => LayerInput::Free(prev.output.clone().expect("hidden layer has output")),
        };
        layers.push(fresh_layer(&mut rng, shape, input, l + 1 == depth));
    }
    Ok(ModelState { layers })
}

/// Inference: `z = W p + b`, `p ← relu(z)` between layers; returns the last `z`.
pub fn forward(state: &ModelState, input: &ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let first = &state.layers[0];
    if input.nrows() != first.weight.ncols() {
        return Err(Error::invalid(format!(
            "input has {} rows, model expects {}",
            input.nrows(),
            first.weight.ncols()
        )));
    }
    let mut z = affine(&first.weight, &first.bias, input);
    for layer in &state.layers[1..] {
        z = affine(&layer.weight, &layer.bias, &relu(&z).view());
    }
    Ok(z)
}

/// Index of the largest entry of each column; ties resolve to the lowest index.
pub fn predictions(logits: &ArrayView2<'_, f64>) -> Vec<usize> {
    logits
        .columns()
        .into_iter()
        .map(|col| {
            let mut best = 0;
            for (k, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Fraction of masked columns whose prediction equals the label.
pub fn accuracy(logits: &ArrayView2<'_, f64>, labels: &[usize], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::invalid("accuracy over an empty mask"));
    }
    if let Some(&i) = mask.iter().find(|&&i| i >= logits.ncols() || i >= labels.len()) {
        return Err(Error::invalid(format!("mask index {i} out of range")));
    }
    let pred = predictions(logits);
    let hits = mask.iter().filter(|&&i| pred[i] == labels[i]).count();
    Ok(hits as f64 / mask.len() as f64)
}
