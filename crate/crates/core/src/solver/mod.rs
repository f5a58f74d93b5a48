//! Subproblem updates and the phase-ordered epoch loop.

pub mod fista;
pub mod phi;
mod schedule;
pub mod updates;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

pub use schedule::{extend_depth, stage_shapes, train, train_with, Problem, TrainOutcome};

use crate::error::{Error, Result};
use crate::model::{relu, HyperParams, LayerInput, LayerState, ModelState};
use crate::quantization::{update_p_quantized, QuantizationSet};
use phi::{Coupling, PhiInputs};

/// Numerical knobs of the inner solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Backtracking growth factor `η > 1`.
    pub step_growth: f64,
    pub step_floor: f64,
    pub step_ceiling: f64,
    pub fista_max_iter: usize,
    pub fista_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            step_growth: 2.0,
            step_floor: 1e-6,
            step_ceiling: 1e12,
            fista_max_iter: 50,
            fista_tol: 1e-8,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_growth > 1.0) {
            return Err(Error::invalid("step growth factor must exceed 1"));
        }
        if !(self.step_floor > 0.0 && self.step_ceiling > self.step_floor) {
            return Err(Error::invalid("step floor must be positive and below the ceiling"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    FullPrecision,
    Quantized,
}

/// Read-only inputs shared by every update of an epoch.
#[derive(Debug, Clone, Copy)]
pub struct EpochContext<'a> {
    pub hyper: &'a HyperParams,
    pub config: &'a SolverConfig,
    /// Class of each sample for the risk term; `None` outside the training split.
    pub targets: &'a [Option<usize>],
    pub quantization: Option<&'a QuantizationSet>,
}

impl EpochContext<'_> {
    pub fn mode(&self) -> Mode {
        if self.quantization.is_some() {
            Mode::Quantized
        } else {
            Mode::FullPrecision
        }
    }
}

/// Barrier-separated phases of one epoch, in execution order. The residual
/// `p_{l+1} − q_l` is formed inside the dual phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Input,
    Weight,
    Bias,
    Preact,
    Output,
    Dual,
}

impl Phase {
    pub const ALL: [Phase; 6] = [Phase::Input, Phase::Weight, Phase::Bias, Phase::Preact, Phase::Output, Phase::Dual];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Input => "p",
            Phase::Weight => "W",
            Phase::Bias => "b",
            Phase::Preact => "z",
            Phase::Output => "q",
            Phase::Dual => "u",
        }
    }
}

fn phi_inputs<'a>(layer: &'a LayerState, coupling: Option<Coupling<'a>>, ctx: &EpochContext<'_>) -> PhiInputs<'a> {
    PhiInputs {
        weight: layer.weight.view(),
        bias: layer.bias.view(),
        preact: layer.preact.view(),
        coupling,
        rho: ctx.hyper.rho,
        nu: ctx.hyper.nu,
    }
}

fn check_finite<'a>(mut values: impl Iterator<Item = &'a f64>, phase: Phase, layer: usize) -> Result<()> {
    if values.all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { phase: phase.name(), layer })
    }
}

/// Applies one phase to a single layer.
///
/// `index` is the 0-based position in the model. `prev` carries
/// `(q_{l-1}, u_{l-1})` and `next_input` carries `p_{l+1}`; each is needed only
/// by the phases that read it.
pub fn update_layer(
    phase: Phase,
    layer: &mut LayerState,
    index: usize,
    prev: Option<Coupling<'_>>,
    next_input: Option<ArrayView2<'_, f64>>,
    ctx: &EpochContext<'_>,
) -> Result<()> {
    let hp = ctx.hyper;
    let id = index + 1;
    match phase {
        Phase::Input => {
            if !layer.input.is_free() {
                return Ok(());
            }
            let coupling = prev.ok_or_else(|| Error::invalid(format!("layer {id} input step needs its predecessor")))?;
            let (value, tau) = {
                let p = layer.input.view();
                let inputs = phi_inputs(layer, Some(coupling.reborrow()), ctx);
                match ctx.quantization {
                    Some(set) => update_p_quantized(&inputs, &p, set),
                    None => {
                        let step = updates::update_p(&inputs, &p, layer.input_step, ctx.config, id)?;
                        (step.value, step.curvature)
                    }
                }
            };
            check_finite(value.iter(), phase, id)?;
            layer.input = LayerInput::Free(value);
            layer.input_step = tau;
        }
        Phase::Weight => {
            let p = layer.input.view();
            let inputs = phi_inputs(layer, None, ctx);
            let step = updates::update_w(&inputs, &p, hp.l2, layer.weight_step, ctx.config, id)?;
            check_finite(step.value.iter(), phase, id)?;
            layer.weight = step.value;
            layer.weight_step = step.curvature;
        }
        Phase::Bias => {
            let b = updates::update_b(&layer.weight.view(), &layer.preact.view(), &layer.input.view());
            check_finite(b.iter(), phase, id)?;
            layer.bias = b;
        }
        Phase::Preact => {
            let a = layer.linear();
            let z = match &layer.output {
                Some(q) => updates::update_z_hidden(&a.view(), &q.view(), &layer.preact.view()),
                None => fista::update_z_output(&a.view(), &layer.preact.view(), ctx.targets, hp.nu, ctx.config),
            };
            check_finite(z.iter(), phase, id)?;
            layer.preact = z;
        }
        Phase::Output => {
            let (Some(q), Some(u)) = (&layer.output, &layer.dual) else {
                return Ok(());
            };
            let p = next_input.ok_or_else(|| Error::invalid(format!("layer {id} output step needs its successor")))?;
            let next = updates::update_q(&relu(&layer.preact).view(), &u.view(), &p, hp.nu, hp.rho);
            debug_assert_eq!(next.dim(), q.dim());
            check_finite(next.iter(), phase, id)?;
            layer.output = Some(next);
        }
        Phase::Dual => {
            let (Some(q), Some(u)) = (&layer.output, &layer.dual) else {
                return Ok(());
            };
            let p = next_input.ok_or_else(|| Error::invalid(format!("layer {id} dual step needs its successor")))?;
            let next = updates::update_u(&u.view(), &p, &q.view(), hp.rho);
            check_finite(next.iter(), phase, id)?;
            layer.dual = Some(next);
        }
    }
    Ok(())
}

/// Applies `phase` to a contiguous block of layers starting at model index
/// `first`. Neighbors outside the block come from `prev_boundary` and
/// `next_boundary`.
pub fn run_block_phase(
    phase: Phase,
    layers: &mut [LayerState],
    first: usize,
    prev_boundary: Option<Coupling<'_>>,
    next_boundary: Option<ArrayView2<'_, f64>>,
    ctx: &EpochContext<'_>,
) -> Result<()> {
    for i in 0..layers.len() {
        let (before, rest) = layers.split_at_mut(i);
        let (cur, after) = rest.split_first_mut().expect("index in range");
        let prev = match before.last() {
            Some(l) => match (&l.output, &l.dual) {
                (Some(q), Some(u)) => Some(Coupling { output: q.view(), dual: u.view() }),
                _ => None,
            },
            None => prev_boundary.map(Coupling::reborrow),
        };
        let next = match after.first() {
            Some(l) => Some(l.input.view()),
            None => next_boundary.map(|v| v.reborrow()),
        };
        update_layer(phase, cur, first + i, prev, next, ctx)?;
    }
    Ok(())
}

/// Applies one phase to every layer of the model.
pub fn run_phase(state: &mut ModelState, phase: Phase, ctx: &EpochContext<'_>) -> Result<()> {
    run_block_phase(phase, &mut state.layers, 0, None, None, ctx)
}

/// Side information from one epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochReport {
    /// Bytes pushed through inter-worker channels.
    pub bytes_sent: u64,
}

/// Something that can advance the model by one epoch.
pub trait EpochRunner {
    fn run_epoch(&mut self, state: &mut ModelState, ctx: &EpochContext<'_>) -> Result<EpochReport>;
}

/// Runs every phase over all layers on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct SequentialRunner;

impl EpochRunner for SequentialRunner {
    fn run_epoch(&mut self, state: &mut ModelState, ctx: &EpochContext<'_>) -> Result<EpochReport> {
        run_epoch(state, ctx)?;
        Ok(EpochReport::default())
    }
}

/// One full epoch: `p → W → b → z → q → u`.
pub fn run_epoch(state: &mut ModelState, ctx: &EpochContext<'_>) -> Result<()> {
    for phase in Phase::ALL {
        run_phase(state, phase, ctx)?;
    }
    Ok(())
}
