//! Subproblem updates for a single layer.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::phi::{eval_phi, grad_input, grad_weight, sq_norm, weight_objective, PhiInputs};
use super::SolverConfig;
use crate::error::{Error, Result};

/// An accepted proximal-gradient step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub value: Array2<f64>,
    /// Curvature parameter (`τ` or `θ`) of the accepted step.
    pub curvature: f64,
}

/// `f(x) + ⟨g, y − x⟩ + (t/2)‖y − x‖²`, evaluated term by term.
pub fn majorizer(fx: f64, grad: &Array2<f64>, x: &ArrayView2<'_, f64>, y: &ArrayView2<'_, f64>, t: f64) -> f64 {
    let d = y - x;
    fx + (grad * &d).sum() + 0.5 * t * sq_norm(&d)
}

/// Multiplicative backtracking: grow `t` by `η` from `max(prev/η, floor)` until
/// `f(x − g/t) ≤ majorizer(x − g/t)`.
///
/// When the predicted decrease `‖g‖²/(2t)` drops below the rounding level of
/// `f(x)`, or the step `g/t` below the rounding level of `x`, the point is
/// returned unchanged, which satisfies the inequality with equality.
fn backtrack(
    x: &ArrayView2<'_, f64>,
    grad: &Array2<f64>,
    prev: f64,
    cfg: &SolverConfig,
    objective: impl Fn(&ArrayView2<'_, f64>) -> f64,
    phase: &'static str,
    layer: usize,
) -> Result<Step> {
    let mut t = (prev / cfg.step_growth).max(cfg.step_floor);
    let gsq = sq_norm(grad);
    if gsq == 0.0 {
        return Ok(Step { value: x.to_owned(), curvature: t });
    }
    let fx = objective(x);
    if !fx.is_finite() {
        return Err(Error::NonFinite { phase, layer });
    }
    let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let xmax = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    loop {
        let cand = x - &(grad / t);
        let fc = objective(&cand.view());
        if fc <= majorizer(fx, grad, x, &cand.view(), t) {
            return Ok(Step { value: cand, curvature: t });
        }
        if gsq / (2.0 * t) <= 1e-13 * fx.abs() || gmax / t <= 1e-13 * xmax {
            return Ok(Step { value: x.to_owned(), curvature: t });
        }
        t *= cfg.step_growth;
        if t > cfg.step_ceiling {
            return Err(Error::StepCeiling { phase, layer, value: t });
        }
    }
}

/// Input-copy step for layer `layer` (1-based, ≥ 2).
pub fn update_p(
    inputs: &PhiInputs<'_>,
    p: &ArrayView2<'_, f64>,
    prev_tau: f64,
    cfg: &SolverConfig,
    layer: usize,
) -> Result<Step> {
    let grad = grad_input(inputs, p);
    backtrack(p, &grad, prev_tau, cfg, |c| eval_phi(inputs, c), "p", layer)
}

/// Weight step on `φ + (l2/2)‖W‖²`.
pub fn update_w(
    inputs: &PhiInputs<'_>,
    p: &ArrayView2<'_, f64>,
    l2: f64,
    prev_theta: f64,
    cfg: &SolverConfig,
    layer: usize,
) -> Result<Step> {
    let grad = grad_weight(inputs, p, l2);
    backtrack(
        &inputs.weight,
        &grad,
        prev_theta,
        cfg,
        |w| weight_objective(&inputs.with_weight(w.view()), p, l2),
        "W",
        layer,
    )
}

/// Exact minimizer in `b`: the row means of `z − W p`.
pub fn update_b(weight: &ArrayView2<'_, f64>, preact: &ArrayView2<'_, f64>, p: &ArrayView2<'_, f64>) -> Array1<f64> {
    let mut r = preact.to_owned();
    r -= &weight.dot(p);
    r.mean_axis(Axis(1)).expect("at least one sample")
}

/// `(ν/2)[(z − a)² + (c − max(z, 0))² + (z − d)²]`.
pub fn z_hidden_objective(z: f64, a: f64, c: f64, d: f64, nu: f64) -> f64 {
    0.5 * nu * ((z - a).powi(2) + (c - z.max(0.0)).powi(2) + (z - d).powi(2))
}

/// Scalar minimizer of [`z_hidden_objective`]; equal objectives pick the
/// nonnegative branch.
pub fn z_hidden_scalar(a: f64, c: f64, d: f64) -> f64 {
    let neg = ((a + d) / 2.0).min(0.0);
    let pos = ((a + c + d) / 3.0).max(0.0);
    if z_hidden_objective(neg, a, c, d, 1.0) < z_hidden_objective(pos, a, c, d, 1.0) {
        neg
    } else {
        pos
    }
}

/// Elementwise hidden pre-activation update with `a = W p + b`, `c = q`,
/// `d = z^k`.
pub fn update_z_hidden(a: &ArrayView2<'_, f64>, q: &ArrayView2<'_, f64>, z: &ArrayView2<'_, f64>) -> Array2<f64> {
    Zip::from(a).and(q).and(z).map_collect(|&a, &c, &d| z_hidden_scalar(a, c, d))
}

/// `(ν f(z) + u + ρ p_{l+1}) / (ν + ρ)`.
pub fn update_q(
    activated: &ArrayView2<'_, f64>,
    dual: &ArrayView2<'_, f64>,
    next_input: &ArrayView2<'_, f64>,
    nu: f64,
    rho: f64,
) -> Array2<f64> {
    Zip::from(activated)
        .and(dual)
        .and(next_input)
        .map_collect(|&f, &u, &p| (nu * f + u + rho * p) / (nu + rho))
}

/// `u + ρ (p_{l+1} − q)`.
pub fn update_u(dual: &ArrayView2<'_, f64>, next_input: &ArrayView2<'_, f64>, output: &ArrayView2<'_, f64>, rho: f64) -> Array2<f64> {
    Zip::from(dual)
        .and(next_input)
        .and(output)
        .map_collect(|&u, &p, &q| u + rho * (p - q))
}

/// Gradient of the `q` subproblem at `q`; zero at the update's output.
pub fn q_subproblem_grad(
    q: &ArrayView2<'_, f64>,
    activated: &ArrayView2<'_, f64>,
    dual: &ArrayView2<'_, f64>,
    next_input: &ArrayView2<'_, f64>,
    nu: f64,
    rho: f64,
) -> Array2<f64> {
    Zip::from(q)
        .and(activated)
        .and(dual)
        .and(next_input)
        .map_collect(|&q, &f, &u, &p| nu * (q - f) - u - rho * (p - q))
}
