//! Poisson quasi-maximum likelihood over a time window.
//!
//! The criterion on a window T is L̂(T, θ) = Σ_{t∈T} [Y_t log λ̂_t(θ) − λ̂_t(θ)]
//! with λ̂_t the truncated conditional mean. Its analytic derivatives are
//!
//! ```text
//! ∂ℓ_t/∂θ  = (Y_t/λ̂_t − 1) ∂λ̂_t/∂θ
//! ∂²ℓ_t/∂θ∂θᵀ = (Y_t/λ̂_t − 1) ∂²λ̂_t/∂θ∂θᵀ − (Y_t/λ̂_t²) ∂λ̂_t ∂λ̂_tᵀ
//! ```
//!
//! and the information estimates at θ̂(T) are
//!
//! ```text
//! Ĵ(T) = (1/|T|) Σ (1/λ̂_t) ∂λ̂_t ∂λ̂_tᵀ
//! Î(T) = (1/|T|) Σ (Y_t/λ̂_t − 1)² ∂λ̂_t ∂λ̂_tᵀ
//! Σ̂(T) = Ĵ Î⁻¹ Ĵ
//! ```
//!
//! Maximization is projected BFGS with the analytic score (see `optim`);
//! without an explicit start it fans out from a small deterministic set of
//! moment-matched points, which keeps fits reproducible on flat surfaces.

use nalgebra::DMatrix;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg::{matrix_rows, sym_pinv, symmetrize};
use crate::model::{IngarchParams, MeanRecursion, ModelSpec, ParamSpace, PresampleMean};
use crate::optim::{maximize, Feasible, MaximizeOptions, Objective};
use crate::series::CountSeries;

/// Relative eigenvalue cutoff for the Î pseudo-inverse on rank-deficient
/// windows.
pub const PINV_REL_CUTOFF: f64 = 1e-10;

/// Inclusive time window T = {lo, …, hi} in series labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Window {
    pub lo: i64,
    pub hi: i64,
}

impl Window {
    pub fn new(lo: i64, hi: i64) -> Result<Self> {
        if lo > hi {
            return Err(Error::InvalidWindow(format!("lo {lo} > hi {hi}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn len(&self) -> usize {
        (self.hi - self.lo + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false // lo <= hi by construction
    }

    pub fn check_in(&self, series: &CountSeries) -> Result<()> {
        if self.lo < series.start_index() || self.hi > series.end_index() {
            return Err(Error::InvalidWindow(format!(
                "window [{}, {}] outside series range [{}, {}]",
                self.lo,
                self.hi,
                series.start_index(),
                series.end_index()
            )));
        }
        Ok(())
    }
}

/// Options shared by every fit.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub space: ParamSpace,
    pub presample: PresampleMean,
    /// Projected-gradient tolerance per observation (scaled by |T|).
    pub tol_grad: f64,
    pub max_iters: usize,
    /// Record the per-iteration log-likelihood trace.
    pub record_trace: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            space: ParamSpace::default(),
            presample: PresampleMean::default(),
            tol_grad: 1e-6,
            max_iters: 500,
            record_trace: false,
        }
    }
}

fn serialize_matrix<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    matrix_rows(m).serialize(s)
}

/// PQMLE output for one window.
#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub theta_hat: IngarchParams,
    pub loglik: f64,
    #[serde(serialize_with = "serialize_matrix")]
    pub j_hat: DMatrix<f64>,
    #[serde(serialize_with = "serialize_matrix")]
    pub i_hat: DMatrix<f64>,
    /// Ĵ Î⁻¹ Ĵ (pseudo-inverse when Î is rank deficient; see `i_singular`).
    #[serde(serialize_with = "serialize_matrix")]
    pub sigma_hat: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Projected-gradient norm at θ̂.
    pub grad_norm: f64,
    pub i_singular: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ll_trace: Option<Vec<f64>>,
}

/// Quasi-log-likelihood L̂(T, θ): recursion seeded at `trunc_at`, summed over
/// the window.
pub fn quasi_loglik(
    series: &CountSeries,
    spec: &ModelSpec,
    window: Window,
    theta: &IngarchParams,
    trunc_at: i64,
    opts: &FitOptions,
) -> Result<f64> {
    let prob = QlProblem::checked(series, spec, window, trunc_at, opts, theta)?;
    Ok(prob.loglik(&theta.to_vec()))
}

/// Analytic score Σ_{t∈T} (Y_t/λ̂_t − 1) ∂λ̂_t/∂θ.
pub fn score(
    series: &CountSeries,
    spec: &ModelSpec,
    window: Window,
    theta: &IngarchParams,
    trunc_at: i64,
    opts: &FitOptions,
) -> Result<Vec<f64>> {
    let prob = QlProblem::checked(series, spec, window, trunc_at, opts, theta)?;
    let mut grad = vec![0.0; spec.dim()];
    prob.loglik_score(&theta.to_vec(), &mut grad);
    Ok(grad)
}

/// −Σ_{t∈T} ∂²ℓ̂_t/∂θ∂θᵀ with the curvature of λ̂ from its companion
/// recursion.
pub fn neg_hessian(
    series: &CountSeries,
    spec: &ModelSpec,
    window: Window,
    theta: &IngarchParams,
    trunc_at: i64,
    opts: &FitOptions,
) -> Result<DMatrix<f64>> {
    let prob = QlProblem::checked(series, spec, window, trunc_at, opts, theta)?;
    Ok(prob.neg_hessian(&theta.to_vec()))
}

/// Ĵ(T) and Î(T) evaluated at an arbitrary θ (usually θ̂(T)).
pub fn info_matrices(
    series: &CountSeries,
    spec: &ModelSpec,
    window: Window,
    theta: &IngarchParams,
    trunc_at: i64,
    opts: &FitOptions,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let prob = QlProblem::checked(series, spec, window, trunc_at, opts, theta)?;
    Ok(prob.info_matrices(&theta.to_vec()))
}

/// Maximizes the quasi-log-likelihood over the admissible region and fills
/// the information estimates at the maximizer. Non-convergence is flagged on
/// the result, not fatal; a rank-deficient Î falls back to a pseudo-inverse
/// and sets `i_singular`.
pub fn fit(
    series: &CountSeries,
    spec: &ModelSpec,
    window: Window,
    trunc_at: i64,
    init: Option<&IngarchParams>,
    opts: &FitOptions,
) -> Result<FitResult> {
    let d = spec.dim();
    if window.len() < d + 1 {
        return Err(Error::SeriesTooShort {
            need: d + 1,
            got: window.len(),
        });
    }
    let mut prob = QlProblem::new(series, spec, window, trunc_at, opts)?;
    let feasible = feasible_set(&opts.space);
    let base_opts = MaximizeOptions {
        tol: opts.tol_grad * window.len() as f64,
        max_iters: opts.max_iters,
        record_trace: opts.record_trace,
        init_inv_hess: None,
    };

    let starts = match init {
        Some(theta) => {
            theta.validate()?;
            if theta.dim() != d {
                return Err(Error::InvalidParams(format!(
                    "init has dimension {}, model needs {d}",
                    theta.dim()
                )));
            }
            vec![theta.to_vec()]
        }
        None => default_starts(spec, &opts.space, prob.window_mean()),
    };

    let mut best: Option<crate::optim::MaximizeOutcome> = None;
    for start in &starts {
        // Seed the quasi-Newton with the expected-information curvature at
        // the start point: −∂²L̂ ≈ |T|·Ĵ, so H₀ = (|T|·Ĵ)⁻¹.
        let mut start_proj = start.clone();
        feasible.project(&mut start_proj);
        let (j0, _) = prob.info_matrices(&start_proj);
        let (j0_inv, j0_singular) = sym_pinv(&j0, PINV_REL_CUTOFF);
        let maximize_opts = MaximizeOptions {
            init_inv_hess: (!j0_singular).then(|| j0_inv / window.len() as f64),
            ..base_opts.clone()
        };
        let out = maximize(&mut prob, start, &feasible, &maximize_opts);
        let better = match &best {
            None => true,
            Some(b) => out.value > b.value,
        };
        if better {
            best = Some(out);
        }
    }
    let out = best.expect("at least one start");

    let theta_hat = IngarchParams::from_slice(spec, &out.x)?;
    let (j_hat, i_hat) = prob.info_matrices(&out.x);
    let (i_inv, i_singular) = sym_pinv(&i_hat, PINV_REL_CUTOFF);
    let sigma_hat = symmetrize(&(&j_hat * i_inv * &j_hat));

    Ok(FitResult {
        theta_hat,
        loglik: out.value,
        j_hat,
        i_hat,
        sigma_hat,
        converged: out.converged,
        iterations: out.iterations,
        grad_norm: out.pg_norm,
        i_singular,
        ll_trace: out.trace,
    })
}

/// Robust sandwich standard errors sqrt(diag(Σ̂⁻¹)/n) from the asymptotic
/// covariance Σ⁻¹ = J⁻¹ I J⁻¹.
pub fn sandwich_se(fit: &FitResult, n: usize) -> Result<Vec<f64>> {
    let (inv, singular) = sym_pinv(&fit.sigma_hat, PINV_REL_CUTOFF);
    if singular {
        return Err(Error::SingularMatrix("sandwich_se: sigma_hat".into()));
    }
    Ok((0..inv.nrows())
        .map(|i| (inv[(i, i)] / n as f64).sqrt())
        .collect())
}

pub(crate) fn feasible_set(space: &ParamSpace) -> Feasible {
    Feasible {
        c_min: space.c_min,
        alpha0_max: space.alpha0_max,
        cap: space.feedback_cap(),
    }
}

/// Deterministic multi-start fan: moment-matched intercept with total
/// feedback weight w ∈ {0, 0.2, 0.5} routed entirely to the count block or
/// entirely to the mean block (skipping empty blocks).
fn default_starts(spec: &ModelSpec, space: &ParamSpace, ybar: f64) -> Vec<Vec<f64>> {
    let d = spec.dim();
    let feasible = feasible_set(space);
    let mut starts: Vec<Vec<f64>> = Vec::new();
    let mut push = |weight: f64, to_alpha: bool| {
        let mut x = vec![0.0; d];
        x[0] = (ybar * (1.0 - weight)).max(space.c_min);
        if weight > 0.0 {
            if to_alpha {
                for i in 0..spec.p {
                    x[1 + i] = weight / spec.p as f64;
                }
            } else {
                for j in 0..spec.q {
                    x[1 + spec.p + j] = weight / spec.q as f64;
                }
            }
        }
        feasible.project(&mut x);
        if !starts.iter().any(|s| s == &x) {
            starts.push(x);
        }
    };
    push(0.0, true);
    for w in [0.2, 0.5] {
        if spec.p > 0 {
            push(w, true);
        }
        if spec.q > 0 {
            push(w, false);
        }
    }
    starts
}

/// One window of the quasi-likelihood with its truncation point; implements
/// the optimizer objective.
pub(crate) struct QlProblem<'a> {
    series: &'a CountSeries,
    spec: ModelSpec,
    window: Window,
    trunc_at: i64,
    presample: PresampleMean,
    grad_scratch: Vec<f64>,
}

impl<'a> QlProblem<'a> {
    pub(crate) fn new(
        series: &'a CountSeries,
        spec: &ModelSpec,
        window: Window,
        trunc_at: i64,
        opts: &FitOptions,
    ) -> Result<Self> {
        spec.validate()?;
        window.check_in(series)?;
        if trunc_at > window.lo {
            return Err(Error::TruncationAfterRange {
                trunc_at,
                lo: window.lo,
            });
        }
        if trunc_at < series.start_index() {
            return Err(Error::InvalidWindow(format!(
                "truncation point {trunc_at} before series start {}",
                series.start_index()
            )));
        }
        Ok(Self {
            series,
            spec: *spec,
            window,
            trunc_at,
            presample: opts.presample,
            grad_scratch: vec![0.0; spec.dim()],
        })
    }

    fn checked(
        series: &'a CountSeries,
        spec: &ModelSpec,
        window: Window,
        trunc_at: i64,
        opts: &FitOptions,
        theta: &IngarchParams,
    ) -> Result<Self> {
        opts.space.check(theta)?;
        Self::new(series, spec, window, trunc_at, opts)
    }

    fn theta_parts<'b>(&self, theta: &'b [f64]) -> (f64, &'b [f64], &'b [f64]) {
        (
            theta[0],
            &theta[1..1 + self.spec.p],
            &theta[1 + self.spec.p..],
        )
    }

    #[inline]
    fn y_in_window(&self, t: i64) -> f64 {
        self.series.values()[(t - self.series.start_index()) as usize] as f64
    }

    fn window_mean(&self) -> f64 {
        let s: f64 = (self.window.lo..=self.window.hi)
            .map(|t| self.y_in_window(t))
            .sum();
        s / self.window.len() as f64
    }

    fn recursion<'b>(&'b self, theta: &'b [f64]) -> MeanRecursion<'b> {
        let (alpha0, alphas, betas) = self.theta_parts(theta);
        MeanRecursion::from_flat(
            self.series,
            &self.spec,
            alpha0,
            alphas,
            betas,
            self.trunc_at,
            self.presample,
        )
    }

    pub(crate) fn loglik(&self, theta: &[f64]) -> f64 {
        let mut rec = self.recursion(theta);
        let mut ll = 0.0;
        for t in self.trunc_at..=self.window.hi {
            let lam = rec.advance();
            if t >= self.window.lo {
                let y = self.y_in_window(t);
                // 0·log λ := 0; λ ≥ c_min keeps the log finite.
                ll += if y > 0.0 { y * lam.ln() - lam } else { -lam };
            }
        }
        ll
    }

    pub(crate) fn loglik_score(&self, theta: &[f64], grad_out: &mut [f64]) -> f64 {
        let d = self.spec.dim();
        let mut rec = self.recursion(theta);
        let mut g = vec![0.0; d];
        let mut ll = 0.0;
        grad_out.fill(0.0);
        for t in self.trunc_at..=self.window.hi {
            let lam = rec.advance_with_gradient(&mut g);
            if t >= self.window.lo {
                let y = self.y_in_window(t);
                ll += if y > 0.0 { y * lam.ln() - lam } else { -lam };
                let w = y / lam - 1.0;
                for (o, &gi) in grad_out.iter_mut().zip(&g) {
                    *o += w * gi;
                }
            }
        }
        ll
    }

    /// (Ĵ, Î) averaged over the window at the given θ.
    pub(crate) fn info_matrices(&self, theta: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = self.spec.dim();
        let mut rec = self.recursion(theta);
        let mut g = vec![0.0; d];
        let mut j_acc = vec![0.0; d * d];
        let mut i_acc = vec![0.0; d * d];
        for t in self.trunc_at..=self.window.hi {
            let lam = rec.advance_with_gradient(&mut g);
            if t >= self.window.lo {
                let y = self.y_in_window(t);
                let wj = 1.0 / lam;
                let wi = (y / lam - 1.0).powi(2);
                for r in 0..d {
                    for c in r..d {
                        let outer = g[r] * g[c];
                        j_acc[r * d + c] += wj * outer;
                        i_acc[r * d + c] += wi * outer;
                    }
                }
            }
        }
        let scale = 1.0 / self.window.len() as f64;
        let fill = |acc: &[f64]| {
            let mut m = DMatrix::zeros(d, d);
            for r in 0..d {
                for c in r..d {
                    let v = acc[r * d + c] * scale;
                    m[(r, c)] = v;
                    m[(c, r)] = v;
                }
            }
            m
        };
        (fill(&j_acc), fill(&i_acc))
    }

    pub(crate) fn neg_hessian(&self, theta: &[f64]) -> DMatrix<f64> {
        let d = self.spec.dim();
        let mut rec = self.recursion(theta);
        let mut g = vec![0.0; d];
        let mut h = vec![0.0; d * d];
        let mut acc = DMatrix::zeros(d, d);
        for t in self.trunc_at..=self.window.hi {
            let lam = rec.advance_with_hessian(&mut g, &mut h);
            if t >= self.window.lo {
                let y = self.y_in_window(t);
                let w = y / lam - 1.0;
                let wg = y / (lam * lam);
                for r in 0..d {
                    for c in 0..d {
                        acc[(r, c)] += wg * g[r] * g[c] - w * h[r * d + c];
                    }
                }
            }
        }
        acc
    }
}

impl Objective for QlProblem<'_> {
    fn value(&mut self, x: &[f64]) -> f64 {
        self.loglik(x)
    }

    fn value_grad(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        let mut scratch = std::mem::take(&mut self.grad_scratch);
        let ll = self.loglik_score(x, &mut scratch);
        grad.copy_from_slice(&scratch);
        self.grad_scratch = scratch;
        ll
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{simulate, stationary_mean, Innovation};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn opts() -> FitOptions {
        FitOptions::default()
    }

    fn params(alpha0: f64, alphas: &[f64], betas: &[f64]) -> IngarchParams {
        IngarchParams::new(alpha0, alphas.to_vec(), betas.to_vec()).unwrap()
    }

    #[test]
    fn single_point_contributions() {
        let spec = ModelSpec::poisson(1, 1).unwrap();
        // θ = (1, 0, 0) gives λ̂ ≡ 1: with Y = 1 the term is 1·log 1 − 1 = −1.
        let theta = params(1.0, &[0.0], &[0.0]);
        let series = CountSeries::from_counts(vec![1]).unwrap();
        let ll = quasi_loglik(&series, &spec, Window::new(1, 1).unwrap(), &theta, 1, &opts())
            .unwrap();
        assert_relative_eq!(ll, -1.0, max_relative = 1e-14);

        // Y = 0 contributes −λ under the 0·log λ := 0 convention.
        let theta2 = params(0.7, &[0.0], &[0.0]);
        let series0 = CountSeries::from_counts(vec![0]).unwrap();
        let ll0 = quasi_loglik(&series0, &spec, Window::new(1, 1).unwrap(), &theta2, 1, &opts())
            .unwrap();
        assert_relative_eq!(ll0, -0.7, max_relative = 1e-14);
    }

    #[test]
    fn loglik_is_additive_over_disjoint_windows() {
        let spec = ModelSpec::poisson(1, 1).unwrap();
        let theta = params(0.4, &[0.15], &[0.2]);
        let series = simulate(&spec, &theta, 60, 50, 2).unwrap();
        let o = opts();
        let full = quasi_loglik(&series, &spec, Window::new(1, 60).unwrap(), &theta, 1, &o)
            .unwrap();
        let a = quasi_loglik(&series, &spec, Window::new(1, 25).unwrap(), &theta, 1, &o).unwrap();
        let b = quasi_loglik(&series, &spec, Window::new(26, 60).unwrap(), &theta, 1, &o).unwrap();
        assert_relative_eq!(full, a + b, max_relative = 1e-12);
    }

    #[test]
    fn score_vanishes_when_observations_match_means() {
        let spec = ModelSpec::poisson(1, 1).unwrap();
        let theta = params(2.0, &[0.0], &[0.0]);
        let series = CountSeries::from_counts(vec![2; 40]).unwrap();
        let s = score(&series, &spec, Window::new(1, 40).unwrap(), &theta, 1, &opts()).unwrap();
        assert!(s.iter().all(|&v| v.abs() < 1e-12), "{s:?}");
    }

    /// Deterministic random draws from the admissible region.
    fn random_theta(rng: &mut ChaCha8Rng, spec: &ModelSpec) -> IngarchParams {
        loop {
            let alpha0 = rng.random_range(0.2..3.0);
            let alphas: Vec<f64> = (0..spec.p).map(|_| rng.random_range(0.0..0.5)).collect();
            let betas: Vec<f64> = (0..spec.q).map(|_| rng.random_range(0.0..0.5)).collect();
            if alphas.iter().sum::<f64>() + betas.iter().sum::<f64>() < 0.9 {
                return IngarchParams::new(alpha0, alphas, betas).unwrap();
            }
        }
    }

    #[test]
    fn score_matches_finite_difference_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let o = opts();
        for draw in 0..20 {
            let spec = ModelSpec::poisson(1 + (draw % 2), 1).unwrap();
            let theta = random_theta(&mut rng, &spec);
            let sim_theta = random_theta(&mut rng, &spec);
            let series = simulate(&spec, &sim_theta, 50, 50, draw as u64).unwrap();
            let window = Window::new(1, 50).unwrap();
            let s = score(&series, &spec, window, &theta, 1, &o).unwrap();
            let flat = theta.to_vec();
            let h = 1e-6;
            for r in 0..spec.dim() {
                let mut up = flat.clone();
                let mut dn = flat.clone();
                up[r] += h;
                dn[r] -= h;
                let lu = quasi_loglik(
                    &series,
                    &spec,
                    window,
                    &IngarchParams::from_slice(&spec, &up).unwrap(),
                    1,
                    &o,
                )
                .unwrap();
                let ld = quasi_loglik(
                    &series,
                    &spec,
                    window,
                    &IngarchParams::from_slice(&spec, &dn).unwrap(),
                    1,
                    &o,
                )
                .unwrap();
                let fd = (lu - ld) / (2.0 * h);
                let scale = s[r].abs().max(1.0);
                assert!(
                    (s[r] - fd).abs() / scale < 1e-5,
                    "draw {draw} coord {r}: {} vs {fd}",
                    s[r]
                );
            }
        }
    }

    #[test]
    fn neg_hessian_matches_finite_difference_jacobian_of_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let o = opts();
        for draw in 0..10 {
            let spec = ModelSpec::poisson(1, 1).unwrap();
            let theta = random_theta(&mut rng, &spec);
            let series = simulate(&spec, &random_theta(&mut rng, &spec), 40, 50, 1000 + draw)
                .unwrap();
            let window = Window::new(1, 40).unwrap();
            let nh = neg_hessian(&series, &spec, window, &theta, 1, &o).unwrap();
            let flat = theta.to_vec();
            let h = 1e-6;
            for c in 0..spec.dim() {
                let mut up = flat.clone();
                let mut dn = flat.clone();
                up[c] += h;
                dn[c] -= h;
                let su = score(
                    &series,
                    &spec,
                    window,
                    &IngarchParams::from_slice(&spec, &up).unwrap(),
                    1,
                    &o,
                )
                .unwrap();
                let sd = score(
                    &series,
                    &spec,
                    window,
                    &IngarchParams::from_slice(&spec, &dn).unwrap(),
                    1,
                    &o,
                )
                .unwrap();
                for r in 0..spec.dim() {
                    let fd = -(su[r] - sd[r]) / (2.0 * h);
                    let scale = nh[(r, c)].abs().max(1.0);
                    assert!(
                        (nh[(r, c)] - fd).abs() / scale < 1e-4,
                        "draw {draw} ({r},{c}): {} vs {fd}",
                        nh[(r, c)]
                    );
                }
            }
        }
    }

    #[test]
    fn neg_hessian_reduces_without_mean_feedback() {
        // q = 0 makes λ̂ linear in θ, so ∂²λ̂ = 0 and the matrix is
        // Σ (Y/λ̂²) ∂λ̂ ∂λ̂ᵀ exactly.
        let spec = ModelSpec::poisson(2, 0).unwrap();
        let theta = params(0.5, &[0.2, 0.1], &[]);
        let series = simulate(&spec, &theta, 60, 50, 3).unwrap();
        let o = opts();
        let window = Window::new(1, 60).unwrap();
        let nh = neg_hessian(&series, &spec, window, &theta, 1, &o).unwrap();
        let grads = crate::model::mean_gradient_path(
            &series,
            &spec,
            &theta,
            1,
            &o.space,
            o.presample,
        )
        .unwrap();
        let lams = crate::model::truncated_mean_path(
            &series,
            &spec,
            &theta,
            1,
            &o.space,
            o.presample,
        )
        .unwrap();
        let d = spec.dim();
        let mut want = DMatrix::zeros(d, d);
        for (t, (g, lam)) in grads.iter().zip(&lams).enumerate() {
            let y = series.values()[t] as f64;
            for r in 0..d {
                for c in 0..d {
                    want[(r, c)] += y / (lam * lam) * g[r] * g[c];
                }
            }
        }
        for r in 0..d {
            for c in 0..d {
                assert_relative_eq!(nh[(r, c)], want[(r, c)], max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn scaled_neg_hessian_approaches_j_on_long_poisson_data() {
        let spec = ModelSpec::poisson(1, 1).unwrap();
        let theta = params(0.4, &[0.15], &[0.2]);
        let n = 20_000;
        let series = simulate(&spec, &theta, n, 500, 8).unwrap();
        let o = opts();
        let window = Window::new(1, n as i64).unwrap();
        let nh = neg_hessian(&series, &spec, window, &theta, 1, &o).unwrap() / n as f64;
        let (j_hat, _) = info_matrices(&series, &spec, window, &theta, 1, &o).unwrap();
        let diff = (&nh - &j_hat).norm() / j_hat.norm();
        assert!(diff < 0.05, "relative Frobenius distance {diff}");
    }

    #[test]
    fn info_matrices_are_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let o = opts();
        for draw in 0..10 {
            let spec = ModelSpec::poisson(1, 1).unwrap();
            let theta = random_theta(&mut rng, &spec);
            let series = simulate(&spec, &random_theta(&mut rng, &spec), 80, 50, draw).unwrap();
            let (j, i) =
                info_matrices(&series, &spec, Window::new(1, 80).unwrap(), &theta, 1, &o).unwrap();
            for m in [&j, &i] {
                assert_eq!(m, &m.transpose());
                assert!(crate::linalg::min_eigenvalue(m) > -1e-10 * m.norm().max(1.0));
            }
        }
    }

    #[test]
    fn fit_recovers_parameters_roughly() {
        let spec = ModelSpec::poisson(1, 1).unwrap();
        let theta = params(0.4, &[0.15], &[0.2]);
        let n = 3000;
        let series = simulate(&spec, &theta, n, 500, 17).unwrap();
        let w = Window::new(1, n as i64).unwrap();
        let fitres = fit(&series, &spec, w, 1, None, &opts()).unwrap();
        assert!(fitres.converged);
        // A maximizer can never sit below the truth on the sample criterion.
        let ll_truth = quasi_loglik(&series, &spec, w, &theta, 1, &opts()).unwrap();
        assert!(fitres.loglik >= ll_truth - 1e-6, "{} < {ll_truth}", fitres.loglik);
        // β is weakly identified at these small counts; coarse recovery only.
        let got = fitres.theta_hat.to_vec();
        for (g, want) in got.iter().zip(theta.to_vec()) {
            assert!((g - want).abs() < 0.3, "got {got:?}");
        }
        let mean_hat = stationary_mean(&spec, &fitres.theta_hat).unwrap();
        assert!((mean_hat - 0.4 / 0.65).abs() < 0.05, "mean {mean_hat}");
    }

    #[test]
    fn fit_constant_series_lands_on_mean_ridge() {
        // Constant data Y ≡ c: any θ with α₀ + α₁ c = c maximizes, so the
        // fitted one-step mean must be c.
        let spec = ModelSpec::poisson(1, 0).unwrap();
        let series = CountSeries::from_counts(vec![3; 200]).unwrap();
        let fitres = fit(&series, &spec, Window::new(1, 200).unwrap(), 1, None, &opts()).unwrap();
        let th = &fitres.theta_hat;
        let fitted_mean = th.alpha0 + th.alphas[0] * 3.0;
        assert!(
            (fitted_mean - 3.0).abs() < 1e-3,
            "fitted mean {fitted_mean}"
        );
        // Degenerate residuals make Î zero; the pseudo-inverse path flags it.
        assert!(fitres.i_singular);
    }

    #[test]
    fn fit_is_deterministic() {
        let spec = ModelSpec::negbin(1, 1, 3.0).unwrap();
        let theta = params(0.4, &[0.15], &[0.2]);
        let series = simulate(&spec, &theta, 600, 200, 4).unwrap();
        let w = Window::new(1, 600).unwrap();
        let a = fit(&series, &spec, w, 1, None, &opts()).unwrap();
        let b = fit(&series, &spec, w, 1, None, &opts()).unwrap();
        assert_eq!(a.theta_hat, b.theta_hat);
        assert_eq!(a.loglik, b.loglik);
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn fit_trace_is_monotone() {
        let spec = ModelSpec::poisson(1, 1).unwrap();
        let theta = params(0.4, &[0.15], &[0.2]);
        let series = simulate(&spec, &theta, 500, 200, 6).unwrap();
        let mut o = opts();
        o.record_trace = true;
        let res = fit(&series, &spec, Window::new(1, 500).unwrap(), 1, None, &o).unwrap();
        let tr = res.ll_trace.unwrap();
        assert!(tr.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn score_is_small_at_interior_maximizer() {
        let spec = ModelSpec::poisson(1, 1).unwrap();
        let theta = params(1.5, &[0.3], &[0.3]);
        let series = simulate(&spec, &theta, 4000, 500, 12).unwrap();
        let w = Window::new(1, 4000).unwrap();
        let o = opts();
        let res = fit(&series, &spec, w, 1, None, &o).unwrap();
        assert!(res.converged);
        assert!(res.grad_norm <= o.tol_grad * w.len() as f64);
    }

    #[test]
    fn i_equals_j_under_poisson_truth() {
        let spec = ModelSpec::poisson(1, 1).unwrap();
        let theta = params(0.4, &[0.15], &[0.2]);
        let n = 10_000;
        let series = simulate(&spec, &theta, n, 500, 23).unwrap();
        let res = fit(&series, &spec, Window::new(1, n as i64).unwrap(), 1, None, &opts())
            .unwrap();
        let diff = (&res.i_hat - &res.j_hat).norm() / res.j_hat.norm();
        assert!(diff < 0.08, "‖Î − Ĵ‖/‖Ĵ‖ = {diff}");
    }

    #[test]
    fn sandwich_se_matches_j_inverse_under_poisson_truth() {
        let spec = ModelSpec::poisson(1, 1).unwrap();
        let theta = params(0.4, &[0.15], &[0.2]);
        let n = 10_000;
        let series = simulate(&spec, &theta, n, 500, 31).unwrap();
        let res = fit(&series, &spec, Window::new(1, n as i64).unwrap(), 1, None, &opts())
            .unwrap();
        let se = sandwich_se(&res, n).unwrap();
        let (j_inv, _) = sym_pinv(&res.j_hat, PINV_REL_CUTOFF);
        for (i, s) in se.iter().enumerate() {
            let alt = (j_inv[(i, i)] / n as f64).sqrt();
            assert!(
                (s - alt).abs() / alt < 0.2,
                "coord {i}: sandwich {s} vs J-based {alt}"
            );
        }
    }

    #[test]
    fn se_scales_as_inverse_sqrt_n() {
        let spec = ModelSpec::negbin(1, 0, 3.0).unwrap();
        let theta = params(0.5, &[0.3], &[]);
        let n = 16_000;
        let series = simulate(&spec, &theta, n, 500, 41).unwrap();
        let half = Window::new(1, (n / 2) as i64).unwrap();
        let full = Window::new(1, n as i64).unwrap();
        let o = opts();
        let r_half = fit(&series, &spec, half, 1, None, &o).unwrap();
        let r_full = fit(&series, &spec, full, 1, None, &o).unwrap();
        let se_half = sandwich_se(&r_half, half.len()).unwrap();
        let se_full = sandwich_se(&r_full, full.len()).unwrap();
        for (h, f) in se_half.iter().zip(&se_full) {
            let ratio = h / f;
            assert!(
                (ratio - std::f64::consts::SQRT_2).abs() < 0.25,
                "ratio {ratio}"
            );
        }
    }

    #[test]
    fn window_shorter_than_dimension_is_rejected() {
        let spec = ModelSpec::poisson(1, 1).unwrap();
        let series = CountSeries::from_counts(vec![1, 2, 1]).unwrap();
        let err = fit(&series, &spec, Window::new(1, 3).unwrap(), 1, None, &opts());
        assert!(err.is_err());
    }

    #[test]
    fn innovation_enum_is_estimation_irrelevant() {
        // The PQMLE never looks at the innovation law; identical data must
        // give identical fits under different declared innovations.
        let spec_p = ModelSpec::poisson(1, 1).unwrap();
        let spec_nb = ModelSpec {
            innovation: Innovation::NegBin { r: 4.0 },
            ..spec_p
        };
        let theta = params(0.4, &[0.15], &[0.2]);
        let series = simulate(&spec_p, &theta, 400, 100, 3).unwrap();
        let w = Window::new(1, 400).unwrap();
        let a = fit(&series, &spec_p, w, 1, None, &opts()).unwrap();
        let b = fit(&series, &spec_nb, w, 1, None, &opts()).unwrap();
        assert_eq!(a.theta_hat, b.theta_hat);
    }
}
