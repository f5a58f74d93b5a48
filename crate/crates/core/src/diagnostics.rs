//! Augmented Lagrangian, residuals and convergence metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{relu, HyperParams, ModelState};
use crate::quantization::QuantizationSet;
use crate::solver::fista;
use crate::solver::phi::{eval_phi, sq_norm, Coupling, PhiInputs};

/// Header of `metrics.csv`.
pub const METRICS_HEADER: &str =
    "epoch,lagrangian,risk,max_residual,mean_residual,ck,train_acc,test_acc,epoch_ms,bytes_sent";

/// One row of the per-epoch metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// `L_ρ`, or `β_ρ` in quantized mode (infinite when an input is off-grid).
    pub lagrangian: f64,
    pub risk: f64,
    pub max_residual: f64,
    pub mean_residual: f64,
    /// Weighted squared change of this epoch; `None` when the weights are not positive.
    pub descent: Option<f64>,
    /// Running minimum of `descent` within the current stage.
    pub ck: Option<f64>,
    pub train_acc: f64,
    pub test_acc: f64,
    pub epoch_ms: f64,
    pub bytes_sent: u64,
}

impl EpochMetrics {
    /// A CSV row matching [`METRICS_HEADER`]. `NA` marks an inapplicable `c_k`.
    pub fn csv_row(&self, record_timing: bool) -> String {
        let ck = self.ck.map_or_else(|| "NA".to_string(), |c| c.to_string());
        let ms = if record_timing { self.epoch_ms } else { 0.0 };
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lagrangian,
            self.risk,
            self.max_residual,
            self.mean_residual,
            ck,
            self.train_acc,
            self.test_acc,
            ms,
            self.bytes_sent
        )
    }
}

/// Softmax cross-entropy of the output pre-activations over labeled columns.
pub fn risk(state: &ModelState, targets: &[Option<usize>]) -> f64 {
    fista::risk(&state.layers.last().expect("non-empty model").preact.view(), targets)
}

/// Full augmented Lagrangian. With a level set, returns `+∞` if any free
/// input lies off the grid.
pub fn lagrangian(
    state: &ModelState,
    targets: &[Option<usize>],
    hyper: &HyperParams,
    quantization: Option<&QuantizationSet>,
) -> f64 {
    if let Some(set) = quantization {
        let off_grid = state
            .layers
            .iter()
            .any(|l| l.input.is_free() && !set.contains_all(&l.input.view()));
        if off_grid {
            return f64::INFINITY;
        }
    }
    let mut total = risk(state, targets);
    for (l, layer) in state.layers.iter().enumerate() {
        let coupling = (l > 0).then(|| {
            let prev = &state.layers[l - 1];
            Coupling {
                output: prev.output.as_ref().expect("hidden layer").view(),
                dual: prev.dual.as_ref().expect("hidden layer").view(),
            }
        });
        let inputs = PhiInputs {
            weight: layer.weight.view(),
            bias: layer.bias.view(),
            preact: layer.preact.view(),
            coupling,
            rho: hyper.rho,
            nu: hyper.nu,
        };
        total += eval_phi(&inputs, &layer.input.view());
        if let Some(q) = &layer.output {
            total += 0.5 * hyper.nu * sq_norm(&(q - &relu(&layer.preact)));
        }
        if hyper.l2 != 0.0 {
            total += 0.5 * hyper.l2 * sq_norm(&layer.weight);
        }
    }
    total
}

/// `‖p_{l+1} − q_l‖_F` for every hidden layer.
pub fn residuals(state: &ModelState) -> Vec<f64> {
    state
        .layers
        .windows(2)
        .map(|w| {
            let q = w[0].output.as_ref().expect("hidden layer");
            sq_norm(&(&w[1].input.view() - q)).sqrt()
        })
        .collect()
}

/// `max_l ‖u_l − ν(q_l − relu(z_l))‖_∞`.
pub fn check_dual_identity(state: &ModelState, nu: f64) -> f64 {
    let mut worst = 0.0f64;
    for layer in &state.layers {
        if let (Some(q), Some(u)) = (&layer.output, &layer.dual) {
            let f = relu(&layer.preact);
            for ((u, q), f) in u.iter().zip(q).zip(&f) {
                worst = worst.max((u - nu * (q - f)).abs());
            }
        }
    }
    worst
}

/// `max(4νS², (√17 + 1)ν/2)`.
pub fn rho_threshold(nu: f64, lipschitz: f64) -> f64 {
    (4.0 * nu * lipschitz * lipschitz).max((17f64.sqrt() + 1.0) * nu / 2.0)
}

/// `(C₁, C₂) = (ν/2 − 2ν²S²/ρ, ρ/2 − 2ν²/ρ − ν/2)`.
pub fn ck_constants(rho: f64, nu: f64, lipschitz: f64) -> (f64, f64) {
    let c1 = nu / 2.0 - 2.0 * nu * nu * lipschitz * lipschitz / rho;
    let c2 = rho / 2.0 - 2.0 * nu * nu / rho - nu / 2.0;
    (c1, c2)
}

/// Squared variable changes over one epoch, with the step parameters already
/// applied to the input and weight terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IterationDeltas {
    /// `Σ τ_l/2 ‖Δp_l‖²`.
    pub input: f64,
    /// `Σ θ_l/2 ‖ΔW_l‖²`.
    pub weight: f64,
    /// `Σ ‖Δb_l‖²`.
    pub bias: f64,
    /// `Σ_{l<L} ‖Δz_l‖²`.
    pub hidden_preact: f64,
    /// `‖Δz_L‖²`.
    pub output_preact: f64,
    /// `Σ ‖Δq_l‖²`.
    pub output_copy: f64,
}

impl IterationDeltas {
    /// Changes from `before` to `after`; the step parameters are read from `after`.
    pub fn between(before: &ModelState, after: &ModelState) -> Result<Self> {
        if before.shapes() != after.shapes() || before.samples() != after.samples() {
            return Err(Error::invalid("states have different shapes"));
        }
        let mut d = IterationDeltas::default();
        let depth = after.depth();
        for (l, (a, b)) in before.layers.iter().zip(&after.layers).enumerate() {
            if b.input.is_free() {
                d.input += 0.5 * b.input_step * sq_norm(&(&b.input.view() - &a.input.view()));
            }
            d.weight += 0.5 * b.weight_step * sq_norm(&(&b.weight - &a.weight));
            d.bias += sq_norm(&(&b.bias - &a.bias));
            let dz = sq_norm(&(&b.preact - &a.preact));
            if l + 1 == depth {
                d.output_preact += dz;
            } else {
                d.hidden_preact += dz;
            }
            if let (Some(qa), Some(qb)) = (&a.output, &b.output) {
                d.output_copy += sq_norm(&(qb - qa));
            }
        }
        Ok(d)
    }
}

/// Weighted sum of one epoch's changes, or `None` when `C₁` or `C₂` is not
/// positive. `include_input = false` gives the variant without the input term.
pub fn descent_term(d: &IterationDeltas, rho: f64, nu: f64, lipschitz: f64, include_input: bool) -> Option<f64> {
    let (c1, c2) = ck_constants(rho, nu, lipschitz);
    if c1 <= 0.0 || c2 <= 0.0 {
        return None;
    }
    let p = if include_input { d.input } else { 0.0 };
    Some(
        p + d.weight
            + nu / 2.0 * d.bias
            + c1 * d.hidden_preact
            + nu / 2.0 * d.output_preact
            + c2 * d.output_copy,
    )
}

pub fn running_min(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .scan(f64::INFINITY, |m, &v| {
            *m = m.min(v);
            Some(*m)
        })
        .collect()
}

/// Per-component series of [`IterationDeltas`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeltaHistory {
    pub input: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub hidden_preact: Vec<f64>,
    pub output_preact: Vec<f64>,
    pub output_copy: Vec<f64>,
}

impl DeltaHistory {
    pub fn push(&mut self, d: &IterationDeltas) {
        self.input.push(d.input);
        self.weight.push(d.weight);
        self.bias.push(d.bias);
        self.hidden_preact.push(d.hidden_preact);
        self.output_preact.push(d.output_preact);
        self.output_copy.push(d.output_copy);
    }
}

/// Running minimum of the weighted changes; `Ok(None)` when not applicable.
pub fn ck_metric(
    history: &DeltaHistory,
    rho: f64,
    nu: f64,
    lipschitz: f64,
    include_input: bool,
) -> Result<Option<Vec<f64>>> {
    let n = history.input.len();
    let lens = [
        history.weight.len(),
        history.bias.len(),
        history.hidden_preact.len(),
        history.output_preact.len(),
        history.output_copy.len(),
    ];
    if lens.iter().any(|&k| k != n) {
        return Err(Error::invalid("delta history series have different lengths"));
    }
    let mut terms = Vec::with_capacity(n);
    for k in 0..n {
        let d = IterationDeltas {
            input: history.input[k],
            weight: history.weight[k],
            bias: history.bias[k],
            hidden_preact: history.hidden_preact[k],
            output_preact: history.output_preact[k],
            output_copy: history.output_copy[k],
        };
        match descent_term(&d, rho, nu, lipschitz, include_input) {
            Some(t) => terms.push(t),
            None => return Ok(None),
        }
    }
    Ok(Some(running_min(&terms)))
}
