//! Output-layer pre-activation update: softmax cross-entropy plus a
//! quadratic pull towards `W_L p_L + b_L`, minimized column by column with
//! accelerated gradient steps.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use super::SolverConfig;

/// Softmax cross-entropy of one logit column against class `y`.
pub fn softmax_cross_entropy(z: &[f64], y: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[y]
}

/// `softmax(z) − e_y`.
pub fn softmax_cross_entropy_grad(z: &[f64], y: usize) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut g: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = g.iter().sum();
    for v in &mut g {
        *v /= s;
    }
    g[y] -= 1.0;
    g
}

/// Total risk over the labeled columns of `z`.
pub fn risk(z: &ArrayView2<'_, f64>, targets: &[Option<usize>]) -> f64 {
    z.axis_iter(Axis(1))
        .zip(targets)
        .filter_map(|(col, t)| t.map(|y| softmax_cross_entropy(&col.to_vec(), y)))
        .sum()
}

/// `CE(z; y) + (ν/2)‖z − a‖²` for one column.
pub fn column_objective(z: &[f64], a: &[f64], y: usize, nu: f64) -> f64 {
    let prox: f64 = z.iter().zip(a).map(|(z, a)| (z - a).powi(2)).sum();
    softmax_cross_entropy(z, y) + 0.5 * nu * prox
}

pub fn column_gradient(z: &[f64], a: &[f64], y: usize, nu: f64) -> Vec<f64> {
    let mut g = softmax_cross_entropy_grad(z, y);
    for ((g, z), a) in g.iter_mut().zip(z).zip(a) {
        *g += nu * (z - a);
    }
    g
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Accelerated gradient with restart, warm-started from `z0`. Every accepted
/// iterate has an objective no larger than the previous one.
pub fn fista_column(a: &[f64], z0: &[f64], y: usize, nu: f64, cfg: &SolverConfig) -> Vec<f64> {
    let step = 1.0 / (1.0 + nu);
    let mut x = z0.to_vec();
    let mut fx = column_objective(&x, a, y, nu);
    let mut look = x.clone();
    let mut t = 1.0f64;
    for _ in 0..cfg.fista_max_iter {
        let gx = column_gradient(&x, a, y, nu);
        if norm(&gx) < cfg.fista_tol {
            break;
        }
        let gl = column_gradient(&look, a, y, nu);
        let mut cand: Vec<f64> = look.iter().zip(&gl).map(|(l, g)| l - step * g).collect();
        let mut fc = column_objective(&cand, a, y, nu);
        if fc > fx {
            // restart from the last accepted iterate with a plain gradient step
            t = 1.0;
            cand = x.iter().zip(&gx).map(|(x, g)| x - step * g).collect();
            fc = column_objective(&cand, a, y, nu);
            if fc > fx {
                break;
            }
            look.clone_from(&cand);
            x = cand;
            fx = fc;
            continue;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let beta = (t - 1.0) / t_next;
        look = cand.iter().zip(&x).map(|(c, x)| c + beta * (c - x)).collect();
        x = cand;
        fx = fc;
        t = t_next;
    }
    x
}

/// New output pre-activations. Labeled columns run [`fista_column`];
/// unlabeled columns are set to `a` exactly.
pub fn update_z_output(
    a: &ArrayView2<'_, f64>,
    z: &ArrayView2<'_, f64>,
    targets: &[Option<usize>],
    nu: f64,
    cfg: &SolverConfig,
) -> Array2<f64> {
    let mut out = a.to_owned();
    for (j, target) in targets.iter().enumerate() {
        if let Some(y) = *target {
            let col: ArrayView1<'_, f64> = a.column(j);
            let next = fista_column(&col.to_vec(), &z.column(j).to_vec(), y, nu, cfg);
            out.column_mut(j).iter_mut().zip(next).for_each(|(o, v)| *o = v);
        }
    }
    out
}
