//! Linear INGARCH(p, q) conditional-mean recursions and simulators.
//!
//! The conditional mean follows
//!
//! ```text
//! λ_t = α₀ + Σ_{i=1..p} α_i Y_{t−i} + Σ_{j=1..q} β_j λ_{t−j}
//! ```
//!
//! with non-negative coefficients and Σα + Σβ strictly below one. Truncated
//! paths treat every observation before a chosen index as zero, which is the
//! information set actually available when estimating on a finite stretch of
//! data. Under an all-zero past the recursion settles at α₀ / (1 − Σβ); that
//! fixed point is the default pre-sample seed (see [`PresampleMean`]).
//!
//! Innovations are Poisson or negative binomial with mean λ_t and success
//! probability r / (r + λ_t), so the conditional mean is λ_t in both cases
//! and the conditional variance is λ_t (1 + λ_t / r) in the NB case.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::CountSeries;

/// Conditional distribution of `Y_t` given the past.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Innovation {
    Poisson,
    /// Negative binomial with dispersion `r > 0`; variance λ(1 + λ/r).
    NegBin { r: f64 },
}

/// INGARCH orders plus the innovation law used for simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Number of count lags (feedback from past observations).
    pub p: usize,
    /// Number of mean lags (feedback from past conditional means).
    pub q: usize,
    pub innovation: Innovation,
}

impl ModelSpec {
    pub fn new(p: usize, q: usize, innovation: Innovation) -> Result<Self> {
        let spec = Self { p, q, innovation };
        spec.validate()?;
        Ok(spec)
    }

    pub fn poisson(p: usize, q: usize) -> Result<Self> {
        Self::new(p, q, Innovation::Poisson)
    }

    pub fn negbin(p: usize, q: usize, r: f64) -> Result<Self> {
        Self::new(p, q, Innovation::NegBin { r })
    }

    pub fn validate(&self) -> Result<()> {
        if self.p + self.q == 0 {
            return Err(Error::InvalidSpec("p + q must be at least 1".into()));
        }
        if let Innovation::NegBin { r } = self.innovation {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::InvalidSpec(format!(
                    "negative binomial dispersion must be positive, got {r}"
                )));
            }
        }
        Ok(())
    }

    /// Parameter dimension d = 1 + p + q.
    pub fn dim(&self) -> usize {
        1 + self.p + self.q
    }
}

/// Parameter vector θ = (α₀, α₁..α_p, β₁..β_q).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngarchParams {
    pub alpha0: f64,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
}

impl IngarchParams {
    pub fn new(alpha0: f64, alphas: Vec<f64>, betas: Vec<f64>) -> Result<Self> {
        let params = Self {
            alpha0,
            alphas,
            betas,
        };
        params.validate()?;
        Ok(params)
    }

    /// Basic shape checks: positive intercept, non-negative feedback,
    /// Σα + Σβ < 1 (strict stationarity region).
    pub fn validate(&self) -> Result<()> {
        if !self.alpha0.is_finite() || self.alpha0 <= 0.0 {
            return Err(Error::InvalidParams(format!(
                "alpha0 must be positive, got {}",
                self.alpha0
            )));
        }
        for (name, coeffs) in [("alpha", &self.alphas), ("beta", &self.betas)] {
            for (i, &c) in coeffs.iter().enumerate() {
                if !c.is_finite() || c < 0.0 {
                    return Err(Error::InvalidParams(format!(
                        "{name}[{}] must be non-negative, got {c}",
                        i + 1
                    )));
                }
            }
        }
        if self.feedback_sum() >= 1.0 {
            return Err(Error::InvalidParams(format!(
                "sum of feedback coefficients must be below 1, got {}",
                self.feedback_sum()
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        1 + self.alphas.len() + self.betas.len()
    }

    pub fn beta_sum(&self) -> f64 {
        self.betas.iter().sum()
    }

    pub fn feedback_sum(&self) -> f64 {
        self.alphas.iter().sum::<f64>() + self.beta_sum()
    }

    /// Flat layout (α₀, α₁..α_p, β₁..β_q) used by the optimizer.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.push(self.alpha0);
        v.extend_from_slice(&self.alphas);
        v.extend_from_slice(&self.betas);
        v
    }

    pub fn from_slice(spec: &ModelSpec, theta: &[f64]) -> Result<Self> {
        if theta.len() != spec.dim() {
            return Err(Error::InvalidParams(format!(
                "expected {} parameters for INGARCH({},{}), got {}",
                spec.dim(),
                spec.p,
                spec.q,
                theta.len()
            )));
        }
        Self::new(
            theta[0],
            theta[1..1 + spec.p].to_vec(),
            theta[1 + spec.p..].to_vec(),
        )
    }

    fn check_shape(&self, spec: &ModelSpec) -> Result<()> {
        if self.alphas.len() != spec.p || self.betas.len() != spec.q {
            return Err(Error::InvalidParams(format!(
                "parameter shape ({}, {}) does not match INGARCH({}, {})",
                self.alphas.len(),
                self.betas.len(),
                spec.p,
                spec.q
            )));
        }
        Ok(())
    }
}

/// Admissible region Θ used by estimation: the box
/// α₀ ∈ [c_min, alpha0_max], α_i, β_j ∈ [0, 1 − eps_stat], intersected with
/// Σα + Σβ ≤ 1 − eps_stat. Keeps every conditional mean ≥ c_min > 0 and the
/// recursion contractive, and is convex so projections are well defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    pub c_min: f64,
    pub alpha0_max: f64,
    pub eps_stat: f64,
}

impl Default for ParamSpace {
    fn default() -> Self {
        Self {
            c_min: 1e-4,
            alpha0_max: 1e6,
            eps_stat: 1e-3,
        }
    }
}

impl ParamSpace {
    /// Upper bound shared by each feedback coefficient and their sum.
    pub fn feedback_cap(&self) -> f64 {
        1.0 - self.eps_stat
    }

    pub fn contains(&self, params: &IngarchParams) -> bool {
        let cap = self.feedback_cap();
        params.alpha0 >= self.c_min
            && params.alpha0 <= self.alpha0_max
            && params
                .alphas
                .iter()
                .chain(params.betas.iter())
                .all(|&c| (0.0..=cap).contains(&c))
            && params.feedback_sum() <= cap
    }

    pub fn check(&self, params: &IngarchParams) -> Result<()> {
        if self.contains(params) {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!(
                "theta {:?} outside the admissible region (c_min={}, cap={})",
                params.to_vec(),
                self.c_min,
                self.feedback_cap()
            )))
        }
    }
}

/// Seed for conditional means before the truncation point. The recursion is
/// unrolled under an all-zero past, whose fixed point is α₀ / (1 − Σβ); the
/// plain intercept α₀ is available as the transient alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresampleMean {
    #[default]
    FixedPoint,
    Intercept,
}

fn validate_inputs(
    series: &CountSeries,
    spec: &ModelSpec,
    theta: &IngarchParams,
    space: &ParamSpace,
    trunc_at: i64,
) -> Result<()> {
    spec.validate()?;
    theta.check_shape(spec)?;
    space.check(theta)?;
    if trunc_at > series.end_index() {
        return Err(Error::TruncationAfterRange {
            trunc_at,
            lo: series.end_index(),
        });
    }
    Ok(())
}

/// Conditional means λ̂_t for t = trunc_at ..= series.end_index(), with every
/// observation before `trunc_at` treated as zero and pre-sample means seeded
/// per `presample`. Entry 0 corresponds to time label `trunc_at`.
pub fn truncated_mean_path(
    series: &CountSeries,
    spec: &ModelSpec,
    theta: &IngarchParams,
    trunc_at: i64,
    space: &ParamSpace,
    presample: PresampleMean,
) -> Result<Vec<f64>> {
    validate_inputs(series, spec, theta, space, trunc_at)?;
    let len = (series.end_index() - trunc_at + 1) as usize;
    let mut path = Vec::with_capacity(len);
    let mut rec = MeanRecursion::new(series, spec, theta, trunc_at, presample);
    for _ in 0..len {
        path.push(rec.advance());
    }
    Ok(path)
}

/// Parameter gradients ∂λ̂_t/∂θ matching [`truncated_mean_path`] entry for
/// entry; each gradient is laid out as (∂/∂α₀, ∂/∂α_i.., ∂/∂β_j..).
pub fn mean_gradient_path(
    series: &CountSeries,
    spec: &ModelSpec,
    theta: &IngarchParams,
    trunc_at: i64,
    space: &ParamSpace,
    presample: PresampleMean,
) -> Result<Vec<Vec<f64>>> {
    validate_inputs(series, spec, theta, space, trunc_at)?;
    let len = (series.end_index() - trunc_at + 1) as usize;
    let d = spec.dim();
    let mut rec = MeanRecursion::new(series, spec, theta, trunc_at, presample);
    let mut grad = vec![0.0; d];
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        rec.advance_with_gradient(&mut grad);
        out.push(grad.clone());
    }
    Ok(out)
}

/// Closed-form stationary mean α₀ / (1 − Σα − Σβ) of the linear model.
pub fn stationary_mean(_spec: &ModelSpec, theta: &IngarchParams) -> Result<f64> {
    let s = theta.feedback_sum();
    if s >= 1.0 {
        return Err(Error::InvalidParams(format!(
            "no stationary mean: feedback sum {s} is not below 1"
        )));
    }
    Ok(theta.alpha0 / (1.0 - s))
}

/// The conditional-mean recursion with lag ring buffers. Observations before
/// `trunc_at` read as zero; pre-sample λ and ∂λ/∂θ come from `presample`.
pub(crate) struct MeanRecursion<'a> {
    y: &'a [u64],
    y_first_label: i64,
    p: usize,
    q: usize,
    d: usize,
    alpha0: f64,
    alphas: &'a [f64],
    betas: &'a [f64],
    t: i64,
    /// Labels below this read as zero observations.
    trunc_origin: i64,
    /// λ̂_{t−1}, …, λ̂_{t−q} (most recent first).
    lam_lag: Vec<f64>,
    /// Gradient lags, q blocks of length d, most recent block first.
    grad_lag: Vec<f64>,
    /// Second-derivative lags, q blocks of d·d, most recent first; filled
    /// lazily only when the curvature recursion is used.
    hess_lag: Option<Vec<f64>>,
    presample: PresampleMean,
}

impl<'a> MeanRecursion<'a> {
    pub(crate) fn new(
        series: &'a CountSeries,
        spec: &ModelSpec,
        theta: &'a IngarchParams,
        trunc_at: i64,
        presample: PresampleMean,
    ) -> Self {
        Self::from_flat(
            series,
            spec,
            theta.alpha0,
            &theta.alphas,
            &theta.betas,
            trunc_at,
            presample,
        )
    }

    /// Constructor over borrowed coefficient slices so the optimizer can
    /// evaluate flat parameter vectors without building an `IngarchParams`.
    pub(crate) fn from_flat(
        series: &'a CountSeries,
        spec: &ModelSpec,
        alpha0: f64,
        alphas: &'a [f64],
        betas: &'a [f64],
        trunc_at: i64,
        presample: PresampleMean,
    ) -> Self {
        let d = spec.dim();
        let (lam0, grad0) = match presample {
            PresampleMean::FixedPoint => {
                let denom = 1.0 - betas.iter().sum::<f64>();
                let lam0 = alpha0 / denom;
                let mut g0 = vec![0.0; d];
                g0[0] = 1.0 / denom;
                for j in 0..spec.q {
                    g0[1 + spec.p + j] = lam0 / denom;
                }
                (lam0, g0)
            }
            PresampleMean::Intercept => {
                let mut g0 = vec![0.0; d];
                g0[0] = 1.0;
                (alpha0, g0)
            }
        };
        let mut grad_lag = Vec::with_capacity(spec.q * d);
        for _ in 0..spec.q {
            grad_lag.extend_from_slice(&grad0);
        }
        Self {
            y: series.values(),
            y_first_label: series.start_index(),
            p: spec.p,
            q: spec.q,
            d,
            alpha0,
            alphas,
            betas,
            t: trunc_at,
            trunc_origin: trunc_at,
            lam_lag: vec![lam0; spec.q],
            grad_lag,
            hess_lag: None,
            presample,
        }
    }

    /// Observation at label `t`; labels before the truncation point (or
    /// outside the series) read as zero.
    #[inline]
    fn y_at(&self, t: i64) -> f64 {
        if t < self.trunc_origin || t < self.y_first_label {
            return 0.0;
        }
        match self.y.get((t - self.y_first_label) as usize) {
            Some(&v) => v as f64,
            None => 0.0,
        }
    }

    /// Advances one step and returns λ̂_t.
    #[inline]
    pub(crate) fn advance(&mut self) -> f64 {
        let lam = self.next_mean();
        self.rotate_mean(lam);
        self.t += 1;
        lam
    }

    /// Advances one step, writing ∂λ̂_t/∂θ into `grad` and returning λ̂_t.
    #[inline]
    pub(crate) fn advance_with_gradient(&mut self, grad: &mut [f64]) -> f64 {
        let lam = self.next_mean();
        self.next_gradient(grad);
        self.rotate_gradient(grad);
        self.rotate_mean(lam);
        self.t += 1;
        lam
    }

    #[inline]
    fn next_mean(&self) -> f64 {
        let mut lam = self.alpha0;
        for i in 0..self.p {
            lam += self.alphas[i] * self.y_at(self.t - (i as i64 + 1));
        }
        for j in 0..self.q {
            lam += self.betas[j] * self.lam_lag[j];
        }
        lam
    }

    /// ∂λ̂_t/∂θ = (1, Y_{t−1..t−p}, λ̂_{t−1..t−q})ᵀ + Σ_j β_j ∂λ̂_{t−j}/∂θ.
    #[inline]
    fn next_gradient(&self, grad: &mut [f64]) {
        grad[0] = 1.0;
        for i in 0..self.p {
            grad[1 + i] = self.y_at(self.t - (i as i64 + 1));
        }
        for j in 0..self.q {
            grad[1 + self.p + j] = self.lam_lag[j];
        }
        for j in 0..self.q {
            let b = self.betas[j];
            if b != 0.0 {
                let block = &self.grad_lag[j * self.d..(j + 1) * self.d];
                for (g, &l) in grad.iter_mut().zip(block) {
                    *g += b * l;
                }
            }
        }
    }

    #[inline]
    fn rotate_mean(&mut self, lam: f64) {
        if self.q > 0 {
            self.lam_lag.rotate_right(1);
            self.lam_lag[0] = lam;
        }
    }

    #[inline]
    fn rotate_gradient(&mut self, grad: &[f64]) {
        if self.q > 0 {
            self.grad_lag.rotate_right(self.d);
            self.grad_lag[..self.d].copy_from_slice(grad);
        }
    }

    /// Advances one step computing λ̂, gradient and the d×d second-derivative
    /// matrix (row-major into `hess`).
    pub(crate) fn advance_with_hessian(&mut self, grad: &mut [f64], hess: &mut [f64]) -> f64 {
        let d = self.d;
        if self.hess_lag.is_none() {
            self.hess_lag = Some(self.initial_hessian_lags());
        }
        let lam = self.next_mean();
        self.next_gradient(grad);

        // ∂²λ̂_t = Σ_j β_j ∂²λ̂_{t−j} + Σ_j (e_{β_j} ∂λ̂_{t−j}ᵀ + ∂λ̂_{t−j} e_{β_j}ᵀ)
        hess.fill(0.0);
        let hess_lag = self.hess_lag.as_ref().unwrap();
        for j in 0..self.q {
            let b = self.betas[j];
            let lag_h = &hess_lag[j * d * d..(j + 1) * d * d];
            if b != 0.0 {
                for (h, &l) in hess.iter_mut().zip(lag_h) {
                    *h += b * l;
                }
            }
            let lag_g = &self.grad_lag[j * d..(j + 1) * d];
            let bj = 1 + self.p + j;
            for r in 0..d {
                hess[bj * d + r] += lag_g[r];
                hess[r * d + bj] += lag_g[r];
            }
        }

        let hess_lag = self.hess_lag.as_mut().unwrap();
        if self.q > 0 {
            hess_lag.rotate_right(d * d);
            hess_lag[..d * d].copy_from_slice(hess);
        }
        self.rotate_gradient(grad);
        self.rotate_mean(lam);
        self.t += 1;
        lam
    }

    fn initial_hessian_lags(&self) -> Vec<f64> {
        let d = self.d;
        let mut h0 = vec![0.0; d * d];
        if let PresampleMean::FixedPoint = self.presample {
            // Fixed point of the curvature recursion under an all-zero past.
            let denom = 1.0 - self.betas.iter().sum::<f64>();
            let mut g0 = vec![0.0; d];
            g0[0] = 1.0 / denom;
            let lam0 = self.alpha0 / denom;
            for j in 0..self.q {
                g0[1 + self.p + j] = lam0 / denom;
            }
            for j in 0..self.q {
                let bj = 1 + self.p + j;
                for r in 0..d {
                    h0[bj * d + r] += g0[r] / denom;
                    h0[r * d + bj] += g0[r] / denom;
                }
            }
        }
        let mut lags = Vec::with_capacity(self.q * d * d);
        for _ in 0..self.q {
            lags.extend_from_slice(&h0);
        }
        lags
    }
}

/// Simulates `n` observations after discarding `burnin`, starting the mean
/// recursion at its all-zero-past fixed point. Reproducible under `seed`.
pub fn simulate(
    spec: &ModelSpec,
    theta: &IngarchParams,
    n: usize,
    burnin: usize,
    seed: u64,
) -> Result<CountSeries> {
    simulate_with_means(spec, theta, n, burnin, seed).map(|(s, _)| s)
}

/// As [`simulate`], also returning the conditional means λ_t of the kept
/// stretch (used by moment diagnostics and tests).
pub fn simulate_with_means(
    spec: &ModelSpec,
    theta: &IngarchParams,
    n: usize,
    burnin: usize,
    seed: u64,
) -> Result<(CountSeries, Vec<f64>)> {
    simulate_piecewise_with_means(spec, theta, None, n, burnin, seed)
}

/// Simulates with a single parameter change: observations 1..=k_star follow
/// `theta`, later ones follow `theta1`, with the mean recursion carried
/// across the switch.
pub fn simulate_piecewise(
    spec: &ModelSpec,
    theta: &IngarchParams,
    change: Option<(&IngarchParams, usize)>,
    n: usize,
    burnin: usize,
    seed: u64,
) -> Result<CountSeries> {
    simulate_piecewise_with_means(spec, theta, change, n, burnin, seed).map(|(s, _)| s)
}

pub fn simulate_piecewise_with_means(
    spec: &ModelSpec,
    theta: &IngarchParams,
    change: Option<(&IngarchParams, usize)>,
    n: usize,
    burnin: usize,
    seed: u64,
) -> Result<(CountSeries, Vec<f64>)> {
    spec.validate()?;
    theta.check_shape(spec)?;
    theta.validate()?;
    if n == 0 {
        return Err(Error::SeriesTooShort { need: 1, got: 0 });
    }
    if let Some((theta1, k_star)) = change {
        theta1.check_shape(spec)?;
        theta1.validate()?;
        if k_star == 0 || k_star >= n {
            return Err(Error::InvalidParams(format!(
                "change point {k_star} must lie strictly inside 1..{n}"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = burnin + n;
    let mut y_hist = vec![0.0; spec.p];
    let mut lam_hist = vec![theta.alpha0 / (1.0 - theta.beta_sum()); spec.q.max(1)];
    let mut counts = Vec::with_capacity(n);
    let mut means = Vec::with_capacity(n);

    for step in 0..total {
        let th = match change {
            Some((theta1, k_star)) if step >= burnin + k_star => theta1,
            _ => theta,
        };
        let mut lam = th.alpha0;
        for i in 0..spec.p {
            lam += th.alphas[i] * y_hist[i];
        }
        for j in 0..spec.q {
            lam += th.betas[j] * lam_hist[j];
        }
        let y = draw_count(&mut rng, &spec.innovation, lam)?;
        if step >= burnin {
            counts.push(y);
            means.push(lam);
        }
        if spec.p > 0 {
            y_hist.rotate_right(1);
            y_hist[0] = y as f64;
        }
        if spec.q > 0 {
            lam_hist.rotate_right(1);
            lam_hist[0] = lam;
        }
    }
    Ok((CountSeries::from_counts(counts)?, means))
}

fn draw_count(rng: &mut ChaCha8Rng, innovation: &Innovation, lam: f64) -> Result<u64> {
    match innovation {
        Innovation::Poisson => sample_poisson(rng, lam),
        Innovation::NegBin { r } => {
            // Gamma–Poisson mixture: Y | G ~ Poisson(G), G ~ Gamma(r, λ/r)
            // gives NB with mean λ and success probability r / (r + λ).
            let gamma = Gamma::new(*r, lam / r)
                .map_err(|e| Error::InvalidSpec(format!("negative binomial draw: {e}")))?;
            let g: f64 = gamma.sample(rng);
            sample_poisson(rng, g)
        }
    }
}

fn sample_poisson(rng: &mut ChaCha8Rng, mean: f64) -> Result<u64> {
    if mean == 0.0 {
        return Ok(0);
    }
    let dist = Poisson::new(mean)
        .map_err(|e| Error::InvalidParams(format!("poisson mean {mean}: {e}")))?;
    let draw: f64 = dist.sample(rng);
    Ok(draw as u64)
}
