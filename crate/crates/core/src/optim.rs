//! Projected quasi-Newton ascent over the box∩simplex parameter region.
//!
//! The feasible set is { x : x₀ ∈ [c_min, a0_max], x_i ∈ [0, cap] for i ≥ 1,
//! Σ_{i≥1} x_i ≤ cap }. Euclidean projection clamps the intercept, clamps the
//! feedback block to its box and, when the sum constraint is active, shifts
//! the block by the bisected multiplier τ with x_i(τ) = clamp(x_i − τ, 0, cap).
//!
//! The search itself is BFGS on the negated objective with a projection-arc
//! backtracking (Armijo) line search. Progress is measured by the projected
//! gradient ‖P(x + ∇ll) − x‖; accepted steps never decrease the objective.

use nalgebra::{DMatrix, DVector};

/// Objective with analytic gradient; `value_grad` must be consistent with
/// `value` (same function, gradient written into `grad`).
pub(crate) trait Objective {
    fn value(&mut self, x: &[f64]) -> f64;
    fn value_grad(&mut self, x: &[f64], grad: &mut [f64]) -> f64;
}

/// The admissible region in flat coordinates (intercept first).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Feasible {
    pub c_min: f64,
    pub alpha0_max: f64,
    pub cap: f64,
}

impl Feasible {
    pub(crate) fn project(&self, x: &mut [f64]) {
        x[0] = x[0].clamp(self.c_min, self.alpha0_max);
        let fb = &mut x[1..];
        if fb.is_empty() {
            return;
        }
        for v in fb.iter_mut() {
            *v = v.clamp(0.0, self.cap);
        }
        let sum: f64 = fb.iter().sum();
        if sum <= self.cap {
            return;
        }
        // Bisect the multiplier; s(τ) = Σ clamp(x_i − τ, 0, cap) is
        // non-increasing with s(0) > cap and s(max x) = 0.
        let mut lo = 0.0f64;
        let mut hi = fb.iter().fold(0.0f64, |a, &b| a.max(b));
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            let s: f64 = fb.iter().map(|&v| (v - mid).clamp(0.0, self.cap)).sum();
            if s > self.cap {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        // hi keeps s(hi) <= cap, so the result is feasible.
        for v in fb.iter_mut() {
            *v = (*v - hi).clamp(0.0, self.cap);
        }
    }

    fn projected(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        self.project(&mut y);
        y
    }
}

#[derive(Debug, Clone)]
pub(crate) struct MaximizeOptions {
    /// Absolute tolerance on the projected-gradient norm.
    pub tol: f64,
    pub max_iters: usize,
    pub record_trace: bool,
    /// Curvature seed: initial inverse Hessian of the negated objective
    /// (e.g. the inverse expected-information matrix). Falls back to the
    /// identity with first-step rescaling when absent.
    pub init_inv_hess: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) struct MaximizeOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub pg_norm: f64,
    /// Objective after the start point and each accepted step.
    pub trace: Option<Vec<f64>>,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 50;

pub(crate) fn maximize<O: Objective>(
    obj: &mut O,
    x0: &[f64],
    set: &Feasible,
    opts: &MaximizeOptions,
) -> MaximizeOutcome {
    let d = x0.len();
    let mut x = set.projected(x0);
    let mut grad = vec![0.0; d];
    // Minimization convention internally: f = −objective, g = −gradient.
    let mut f = -obj.value_grad(&x, &mut grad);
    for g in grad.iter_mut() {
        *g = -*g;
    }
    let mut trace = opts.record_trace.then(|| vec![-f]);

    let seed_hess = opts
        .init_inv_hess
        .clone()
        .filter(|h| h.nrows() == d && h.iter().all(|v| v.is_finite()));
    let mut inv_hess = seed_hess
        .clone()
        .unwrap_or_else(|| DMatrix::identity(d, d));
    let mut scaled = seed_hess.is_some();
    let mut pg_norm = projected_gradient_norm(set, &x, &grad);
    let mut converged = pg_norm <= opts.tol;
    let mut iterations = 0;

    while !converged && iterations < opts.max_iters {
        iterations += 1;
        let g_vec = DVector::from_column_slice(&grad);
        let mut dir = -(&inv_hess * &g_vec);
        if dir.dot(&g_vec) >= 0.0 {
            inv_hess = DMatrix::identity(d, d);
            scaled = false;
            dir = -g_vec.clone();
        }

        let accepted = line_search(obj, set, &x, f, &grad, dir.as_slice());
        let (x_new, f_new) = match accepted {
            Some(hit) => hit,
            None => {
                // Retry once along steepest ascent before giving up.
                inv_hess = DMatrix::identity(d, d);
                scaled = false;
                let steepest: Vec<f64> = grad.iter().map(|&g| -g).collect();
                match line_search(obj, set, &x, f, &grad, &steepest) {
                    Some(hit) => hit,
                    None => break,
                }
            }
        };

        let mut grad_new = vec![0.0; d];
        let check = -obj.value_grad(&x_new, &mut grad_new);
        debug_assert!((check - f_new).abs() <= 1e-8 * (1.0 + f_new.abs()));
        for g in grad_new.iter_mut() {
            *g = -*g;
        }

        let s = DVector::from_iterator(d, x_new.iter().zip(&x).map(|(a, b)| a - b));
        let y = DVector::from_iterator(d, grad_new.iter().zip(&grad).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if !scaled {
                let yy = y.dot(&y);
                if yy > 0.0 {
                    inv_hess = DMatrix::identity(d, d) * (sy / yy);
                }
                scaled = true;
            }
            bfgs_update(&mut inv_hess, &s, &y, sy);
        }

        x = x_new;
        f = f_new;
        grad = grad_new;
        if let Some(tr) = trace.as_mut() {
            tr.push(-f);
        }
        pg_norm = projected_gradient_norm(set, &x, &grad);
        converged = pg_norm <= opts.tol;
    }

    MaximizeOutcome {
        x,
        value: -f,
        iterations,
        converged,
        pg_norm,
        trace,
    }
}

/// ‖P(x − g) − x‖₂ in the minimization convention.
fn projected_gradient_norm(set: &Feasible, x: &[f64], grad_min: &[f64]) -> f64 {
    let mut stepped: Vec<f64> = x.iter().zip(grad_min).map(|(a, g)| a - g).collect();
    set.project(&mut stepped);
    stepped
        .iter()
        .zip(x)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Backtracking along the projection arc; returns the accepted point and its
/// (minimization) value.
fn line_search<O: Objective>(
    obj: &mut O,
    set: &Feasible,
    x: &[f64],
    f: f64,
    grad_min: &[f64],
    dir: &[f64],
) -> Option<(Vec<f64>, f64)> {
    let mut step = 1.0;
    for _ in 0..MAX_BACKTRACKS {
        let mut cand: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + step * d).collect();
        set.project(&mut cand);
        let dx_dot_g: f64 = cand
            .iter()
            .zip(x)
            .zip(grad_min)
            .map(|((c, a), g)| (c - a) * g)
            .sum();
        let moved = cand.iter().zip(x).any(|(a, b)| a != b);
        if moved {
            let f_cand = -obj.value(&cand);
            if f_cand.is_finite() && f_cand <= f + ARMIJO_C1 * dx_dot_g {
                return Some((cand, f_cand));
            }
        }
        step *= 0.5;
    }
    None
}

fn bfgs_update(h: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>, sy: f64) {
    let rho = 1.0 / sy;
    let hy = &*h * y;
    let yhy = y.dot(&hy);
    // H ← H − ρ(H y sᵀ + s yᵀ H) + ρ² (yᵀHy) s sᵀ + ρ s sᵀ
    let s_hy = s * hy.transpose();
    *h -= rho * (&s_hy + s_hy.transpose());
    *h += (rho * rho * yhy + rho) * (s * s.transpose());
}
