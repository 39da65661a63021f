//! Retrospective (off-line) change-point scan.
//!
//! For every admissible split k the series is fitted separately on the two
//! sides and the scaled discrepancy
//!
//! ```text
//! C_{n,k} = (1/q²(k/n)) · (k²(n−k)²/n³) · Δθ_kᵀ Σ̂(u_n) Δθ_k,
//! Δθ_k = θ̂(T_{1,k}) − θ̂(T_{k+1,n})
//! ```
//!
//! is evaluated against the split-sample covariance Σ̂(u_n), the average of
//! the two sub-window sandwich matrices Ĵ Î⁻¹ Ĵ fitted on T_{1,u_n} and
//! T_{u_n+1,n}. The test statistic is the maximum over k ∈ [v_n, n−v_n]; it
//! is compared with the Monte-Carlo (1−α)-quantile of
//! sup_τ ‖W_d(τ)‖²/q²(τ) for a d-dimensional Brownian bridge W_d, and the
//! argmax is the breakpoint estimate when the test rejects.
//!
//! u_n and v_n default to ⌊(log n)^2.5⌋ and ⌊(log n)^2⌋ (natural log), with
//! v_n floored so that every sub-window fit stays identifiable. Scans warm
//! start each window fit at the neighbouring split's estimate; the two scan
//! directions are independent chains and run concurrently.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize, Serializer};

use crate::critvals::{self, CritvalCache, CritvalParams, CritvalRequest, Functional};
use crate::error::{Error, Result};
use crate::linalg::{matrix_rows, quad_form, sym_pinv, symmetrize};
use crate::model::{IngarchParams, ModelSpec};
use crate::pqmle::{fit, FitOptions, FitResult, Window, PINV_REL_CUTOFF};
use crate::series::CountSeries;

/// Weight q(τ) applied to the scan statistic; the power family
/// (τ(1−τ))^γ with γ ∈ [0, ½) sharpens sensitivity near the sample edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum WeightFn {
    Constant,
    Power { gamma: f64 },
}

impl Default for WeightFn {
    fn default() -> Self {
        WeightFn::Constant
    }
}

impl WeightFn {
    pub fn validate(&self) -> Result<()> {
        if let WeightFn::Power { gamma } = self {
            if !(0.0..0.5).contains(gamma) {
                return Err(Error::InvalidRequest(format!(
                    "power weight exponent must lie in [0, 0.5), got {gamma}"
                )));
            }
        }
        Ok(())
    }

    /// Stable fragment for cache keys.
    pub(crate) fn key_fragment(&self) -> String {
        match self {
            WeightFn::Constant => "const".into(),
            WeightFn::Power { gamma } => format!("pow:{:016x}", gamma.to_bits()),
        }
    }
}

/// q(τ) for τ ∈ (0, 1).
pub fn weight_q(tau: f64, weight: &WeightFn) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidRequest(format!(
            "weight argument must lie in (0, 1), got {tau}"
        )));
    }
    weight.validate()?;
    Ok(match weight {
        WeightFn::Constant => 1.0,
        WeightFn::Power { gamma } => (tau * (1.0 - tau)).powf(*gamma),
    })
}

/// Which observations feed the conditional-mean recursion of a window fit:
/// everything back to the series start, or only the window itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Truncation {
    #[default]
    SeriesStart,
    WindowStart,
}

impl Truncation {
    pub fn resolve(&self, series_start: i64, window_lo: i64) -> i64 {
        match self {
            Truncation::SeriesStart => series_start,
            Truncation::WindowStart => window_lo,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RetroConfig {
    /// Exponent for u_n = ⌊(log n)^delta_u⌋, within [2, 2.5].
    pub delta_u: f64,
    /// Exponent for v_n = ⌊(log n)^delta_v⌋, within [2, 2.5].
    pub delta_v: f64,
    pub weight: WeightFn,
    pub alpha: f64,
    pub trunc: Truncation,
    pub fit: FitOptions,
    pub critval: CritvalParams,
}

impl Default for RetroConfig {
    fn default() -> Self {
        Self {
            delta_u: 2.5,
            delta_v: 2.0,
            weight: WeightFn::Constant,
            alpha: 0.05,
            trunc: Truncation::SeriesStart,
            fit: FitOptions::default(),
            critval: CritvalParams::default(),
        }
    }
}

impl RetroConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("delta_u", self.delta_u), ("delta_v", self.delta_v)] {
            if !(2.0..=2.5).contains(&v) {
                return Err(Error::InvalidRequest(format!(
                    "{name} must lie in [2, 2.5], got {v}"
                )));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidRequest(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        self.weight.validate()
    }
}

/// ⌊(log n)^delta⌋ with the natural logarithm.
pub fn log_power_index(n: usize, delta: f64) -> i64 {
    (n as f64).ln().powf(delta).floor() as i64
}

fn serialize_matrix<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    matrix_rows(m).serialize(s)
}

/// One profile entry: split at label k, statistic value C_{n,k}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScanPoint {
    pub k: i64,
    pub value: f64,
}

/// Split-sample covariance: the two sub-window fits and their average
/// sandwich matrix.
#[derive(Debug, Clone)]
pub struct SplitSigma {
    pub matrix: DMatrix<f64>,
    pub left: FitResult,
    pub right: FitResult,
}

/// Σ̂(u_n) = ½ [ Ĵ Î⁻¹ Ĵ (T_{1,u_n}) + Ĵ Î⁻¹ Ĵ (T_{u_n+1,n}) ], each factor
/// evaluated at the PQMLE of its own sub-window. Sub-fit non-convergence is
/// flagged on the embedded results, not fatal.
pub fn sigma_un(
    series: &CountSeries,
    spec: &ModelSpec,
    u_n: i64,
    trunc: Truncation,
    opts: &FitOptions,
) -> Result<SplitSigma> {
    let n = series.len() as i64;
    let d = spec.dim() as i64;
    if u_n < d + 1 || u_n > n - d - 1 {
        return Err(Error::InvalidWindow(format!(
            "u_n = {u_n} outside [{}, {}]",
            d + 1,
            n - d - 1
        )));
    }
    let start = series.start_index();
    let left_w = Window::new(start, start + u_n - 1)?;
    let right_w = Window::new(start + u_n, series.end_index())?;
    let left = fit(series, spec, left_w, start, None, opts)?;
    let right = fit(
        series,
        spec,
        right_w,
        trunc.resolve(start, right_w.lo),
        None,
        opts,
    )?;
    let matrix = symmetrize(&(0.5 * (&left.sigma_hat + &right.sigma_hat)));
    Ok(SplitSigma {
        matrix,
        left,
        right,
    })
}

/// Profile C_{n,k} from per-split estimates: pure assembly, shared by the
/// scan and by invariance tests.
pub(crate) fn profile_from_estimates(
    n: usize,
    start_label: i64,
    ks: &[i64],
    left: &[IngarchParams],
    right: &[IngarchParams],
    sigma: &DMatrix<f64>,
    weight: &WeightFn,
) -> Result<Vec<ScanPoint>> {
    let nf = n as f64;
    let mut out = Vec::with_capacity(ks.len());
    for (i, &k_label) in ks.iter().enumerate() {
        let k = (k_label - start_label + 1) as f64;
        let diff: DVector<f64> =
            DVector::from_vec(left[i].to_vec()) - DVector::from_vec(right[i].to_vec());
        let q = weight_q(k / nf, weight)?;
        let scale = (k * k * (nf - k) * (nf - k)) / (nf * nf * nf);
        out.push(ScanPoint {
            k: k_label,
            value: scale * quad_form(&diff, sigma) / (q * q),
        });
    }
    Ok(out)
}

/// Scan outcome before the critical-value decision.
#[derive(Debug, Clone)]
pub struct ScanProfile {
    pub u_n: i64,
    pub v_n: i64,
    pub statistic: f64,
    /// Smallest maximizing split label.
    pub argmax: i64,
    pub profile: Vec<ScanPoint>,
    pub sigma: SplitSigma,
    /// Split labels whose window fit did not converge.
    pub nonconverged_ks: Vec<i64>,
}

/// Runs the window fits and assembles the statistic profile.
pub fn scan_statistic(
    series: &CountSeries,
    spec: &ModelSpec,
    config: &RetroConfig,
) -> Result<ScanProfile> {
    config.validate()?;
    spec.validate()?;
    let n = series.len();
    let d = spec.dim() as i64;
    let u_n = log_power_index(n, config.delta_u).max(d + 2);
    let v_n = log_power_index(n, config.delta_v).max(d + 2);
    if (n as i64) < 2 * v_n + 2 {
        return Err(Error::SeriesTooShort {
            need: (2 * v_n + 2) as usize,
            got: n,
        });
    }

    let sigma = sigma_un(series, spec, u_n, config.trunc, &config.fit)?;

    let start = series.start_index();
    let end = series.end_index();
    let ks: Vec<i64> = (v_n..=(n as i64 - v_n)).map(|k| start + k - 1).collect();

    // Forward chain of T_{1,k} fits and backward chain of T_{k+1,n} fits;
    // independent, so they may run concurrently.
    let left_chain = || -> Result<Vec<FitResult>> {
        let mut out = Vec::with_capacity(ks.len());
        let mut init: Option<IngarchParams> = None;
        for &k_label in &ks {
            let w = Window::new(start, k_label)?;
            let res = fit(series, spec, w, start, init.as_ref(), &config.fit)?;
            init = Some(res.theta_hat.clone());
            out.push(res);
        }
        Ok(out)
    };
    let right_chain = || -> Result<Vec<FitResult>> {
        let mut out = Vec::with_capacity(ks.len());
        let mut init: Option<IngarchParams> = None;
        for &k_label in ks.iter().rev() {
            let w = Window::new(k_label + 1, end)?;
            let trunc_at = config.trunc.resolve(start, w.lo);
            let res = fit(series, spec, w, trunc_at, init.as_ref(), &config.fit)?;
            init = Some(res.theta_hat.clone());
            out.push(res);
        }
        out.reverse();
        Ok(out)
    };
    let (left, right) = rayon::join(left_chain, right_chain);
    let (left, right) = (left?, right?);

    let mut nonconverged_ks = Vec::new();
    for (i, &k_label) in ks.iter().enumerate() {
        if !left[i].converged || !right[i].converged {
            nonconverged_ks.push(k_label);
        }
    }

    let left_thetas: Vec<IngarchParams> = left.into_iter().map(|f| f.theta_hat).collect();
    let right_thetas: Vec<IngarchParams> = right.into_iter().map(|f| f.theta_hat).collect();
    let profile = profile_from_estimates(
        n,
        start,
        &ks,
        &left_thetas,
        &right_thetas,
        &sigma.matrix,
        &config.weight,
    )?;

    let (argmax, statistic) = profile
        .iter()
        .fold((ks[0], f64::NEG_INFINITY), |(bk, bv), p| {
            if p.value > bv {
                (p.k, p.value)
            } else {
                (bk, bv)
            }
        });

    Ok(ScanProfile {
        u_n,
        v_n,
        statistic,
        argmax,
        profile,
        sigma,
        nonconverged_ks,
    })
}

/// Full report: profile, statistic, Monte-Carlo critical value, decision and
/// breakpoint estimate.
#[derive(Debug, Clone, Serialize)]
pub struct RetroReport {
    pub schema: &'static str,
    pub n: usize,
    pub d: usize,
    pub alpha: f64,
    pub delta_u: f64,
    pub delta_v: f64,
    pub weight: WeightFn,
    pub trunc: Truncation,
    pub u_n: i64,
    pub v_n: i64,
    pub statistic: f64,
    pub critical_value: f64,
    pub critval_cache_key: String,
    pub reject: bool,
    /// Breakpoint estimate (smallest maximizing split), present on rejection.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_hat: Option<i64>,
    #[serde(serialize_with = "serialize_matrix")]
    pub sigma_un: DMatrix<f64>,
    pub sigma_fits_converged: [bool; 2],
    pub nonconverged_ks: Vec<i64>,
    pub profile: Vec<ScanPoint>,
}

impl RetroReport {
    /// Profile as `k,value` CSV for external plotting.
    pub fn profile_csv(&self) -> String {
        let mut out = String::from("k,c_nk\n");
        for p in &self.profile {
            out.push_str(&format!("{},{}\n", p.k, p.value));
        }
        out
    }
}

/// Runs the scan and decides against the Monte-Carlo critical value
/// (cache-backed when a cache is supplied).
pub fn scan(
    series: &CountSeries,
    spec: &ModelSpec,
    config: &RetroConfig,
    cache: Option<&CritvalCache>,
) -> Result<RetroReport> {
    config.validate()?;
    let req = CritvalRequest {
        d: spec.dim(),
        alpha: config.alpha,
        functional: Functional::BridgeSupSq {
            weight: config.weight,
        },
        grid: config.critval.grid,
        paths: config.critval.paths,
        seed: config.critval.seed,
    };
    let c_alpha = critvals::resolve(&req, cache)?;
    scan_with_critical_value(series, spec, config, c_alpha, req.cache_key())
}

/// As [`scan`] with an externally supplied critical value (replication
/// harness, pre-resolved quantiles).
pub fn scan_with_critical_value(
    series: &CountSeries,
    spec: &ModelSpec,
    config: &RetroConfig,
    critical_value: f64,
    cache_key: String,
) -> Result<RetroReport> {
    let prof = scan_statistic(series, spec, config)?;
    let reject = prof.statistic > critical_value;
    Ok(RetroReport {
        schema: "ingarch-cpd/retro/v1",
        n: series.len(),
        d: spec.dim(),
        alpha: config.alpha,
        delta_u: config.delta_u,
        delta_v: config.delta_v,
        weight: config.weight,
        trunc: config.trunc,
        u_n: prof.u_n,
        v_n: prof.v_n,
        statistic: prof.statistic,
        critical_value,
        critval_cache_key: cache_key,
        reject,
        t_hat: reject.then_some(prof.argmax),
        sigma_un: prof.sigma.matrix.clone(),
        sigma_fits_converged: [prof.sigma.left.converged, prof.sigma.right.converged],
        nonconverged_ks: prof.nonconverged_ks,
        profile: prof.profile,
    })
}

/// Inverts Σ̂ (report diagnostics); errors instead of pseudo-inverting.
pub fn sigma_inverse(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (inv, singular) = sym_pinv(sigma, PINV_REL_CUTOFF);
    if singular {
        return Err(Error::SingularMatrix("sigma_un".into()));
    }
    Ok(inv)
}
