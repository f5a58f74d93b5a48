//! The per-layer coupling term φ and its gradients.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Output copy and dual of the previous layer.
#[derive(Debug, Clone, Copy)]
pub struct Coupling<'a> {
    pub output: ArrayView2<'a, f64>,
    pub dual: ArrayView2<'a, f64>,
}

/// Everything φ depends on besides the variable being optimized.
#[derive(Debug, Clone, Copy)]
pub struct PhiInputs<'a> {
    pub weight: ArrayView2<'a, f64>,
    pub bias: ArrayView1<'a, f64>,
    pub preact: ArrayView2<'a, f64>,
    /// `(q_{l-1}, u_{l-1})`; absent for the first layer.
    pub coupling: Option<Coupling<'a>>,
    pub rho: f64,
    pub nu: f64,
}

impl<'a> Coupling<'a> {
    /// Shortens the borrow; views are invariant in their lifetime.
    pub fn reborrow<'b>(self) -> Coupling<'b>
    where
        'a: 'b,
    {
        Coupling { output: self.output.reborrow(), dual: self.dual.reborrow() }
    }
}

impl<'a> PhiInputs<'a> {
    pub fn reborrow<'b>(self) -> PhiInputs<'b>
    where
        'a: 'b,
    {
        PhiInputs {
            weight: self.weight.reborrow(),
            bias: self.bias.reborrow(),
            preact: self.preact.reborrow(),
            coupling: self.coupling.map(Coupling::reborrow),
            rho: self.rho,
            nu: self.nu,
        }
    }

    pub fn with_weight<'b>(self, weight: ArrayView2<'b, f64>) -> PhiInputs<'b>
    where
        'a: 'b,
    {
        PhiInputs { weight, ..self.reborrow() }
    }

    pub fn with_bias<'b>(self, bias: ArrayView1<'b, f64>) -> PhiInputs<'b>
    where
        'a: 'b,
    {
        PhiInputs { bias, ..self.reborrow() }
    }
}

pub(crate) fn sq_norm<'a>(x: impl IntoIterator<Item = &'a f64>) -> f64 {
    x.into_iter().map(|v| v * v).sum()
}

/// `z − W p − b 1ᵀ`.
pub fn residual(inputs: &PhiInputs<'_>, p: &ArrayView2<'_, f64>) -> Array2<f64> {
    let mut r = inputs.preact.to_owned();
    r -= &inputs.weight.dot(p);
    r -= &inputs.bias.insert_axis(Axis(1));
    r
}

/// `(ν/2)‖z − Wp − b1ᵀ‖²` plus, with a coupling, `⟨u, p − q⟩ + (ρ/2)‖p − q‖²`.
pub fn eval_phi(inputs: &PhiInputs<'_>, p: &ArrayView2<'_, f64>) -> f64 {
    let mut val = 0.5 * inputs.nu * sq_norm(&residual(inputs, p));
    if let Some(c) = inputs.coupling {
        let d = p - &c.output;
        val += (&c.dual * &d).sum() + 0.5 * inputs.rho * sq_norm(&d);
    }
    val
}

/// `∇_p φ = −ν Wᵀ r + u + ρ (p − q)`.
pub fn grad_input(inputs: &PhiInputs<'_>, p: &ArrayView2<'_, f64>) -> Array2<f64> {
    let r = residual(inputs, p);
    let mut g = inputs.weight.t().dot(&r) * -inputs.nu;
    if let Some(c) = inputs.coupling {
        g += &c.dual;
        g.scaled_add(inputs.rho, &(p - &c.output));
    }
    g
}

/// `∇_W` of `φ + (l2/2)‖W‖²`: `−ν r pᵀ + l2 W`.
pub fn grad_weight(inputs: &PhiInputs<'_>, p: &ArrayView2<'_, f64>, l2: f64) -> Array2<f64> {
    let r = residual(inputs, p);
    let mut g = r.dot(&p.t()) * -inputs.nu;
    if l2 != 0.0 {
        g.scaled_add(l2, &inputs.weight);
    }
    g
}

/// `∇_b φ = −ν r 1`.
pub fn grad_bias(inputs: &PhiInputs<'_>, p: &ArrayView2<'_, f64>) -> Array1<f64> {
    residual(inputs, p).sum_axis(Axis(1)) * -inputs.nu
}

/// The weight subproblem objective `φ + (l2/2)‖W‖²`.
pub fn weight_objective(inputs: &PhiInputs<'_>, p: &ArrayView2<'_, f64>, l2: f64) -> f64 {
    let mut val = eval_phi(inputs, p);
    if l2 != 0.0 {
        val += 0.5 * l2 * sq_norm(inputs.weight);
    }
    val
}
