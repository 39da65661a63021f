//! Sequential (on-line) change-point monitoring over a closed-end horizon.
//!
//! A historical stretch Y_1..Y_m calibrates θ̂(T_{1,m}) and the normalizer
//! Î(T_{1,m})^{−1/2} Ĵ(T_{1,m}). At each monitoring instant k the detector
//!
//! ```text
//! D_{k,ℓ} = √m · ((k−ℓ)/k) · ‖ Î(T_{1,m})^{−1/2} Ĵ(T_{1,m}) (θ̂(T_{ℓ,k}) − θ̂(T_{1,m})) ‖
//! ```
//!
//! is evaluated for every ℓ in Π_{m,k} = {m−v′, …, k−v′} (v′ = ⌊(log m)^δ⌋,
//! natural log, floored at d+1 for identifiability) and compared with a
//! non-increasing boundary b((k−ℓ)/m); the first k with
//! max_ℓ D_{k,ℓ}/b((k−ℓ)/m) > 1 stops the procedure. The shipped boundary is
//! the constant C_α, the Monte-Carlo (1−α)-quantile of U_{d,T}. Window fits
//! default to window-start truncation: the updated estimate conditions only
//! on its own window, not on the historical observations (a config choice;
//! series-start truncation is available).
//!
//! The per-k evaluation reuses the previous step's estimate for every ℓ as a
//! warm start, so advancing one observation costs a handful of quasi-Newton
//! iterations per window.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::critvals::{self, CritvalCache, CritvalParams, CritvalRequest};
use crate::error::{Error, Result};
use crate::linalg::sym_inv_sqrt;
use crate::model::{IngarchParams, ModelSpec};
use crate::pqmle::{fit, FitOptions, Window};
use crate::retrospective::{log_power_index, Truncation};
use crate::series::CountSeries;

/// Eigenvalue floor for the calibration inverse square root; calibration
/// aborts below it rather than regularizing.
pub const CALIBRATION_EIG_FLOOR: f64 = 1e-10;

/// Boundary function b(·) (Assumption-style: positive, non-increasing,
/// continuous, with positive infimum). Only the constant family ships.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Boundary {
    Constant { c: f64 },
}

impl Boundary {
    pub fn value(&self, _elapsed_over_m: f64) -> f64 {
        match self {
            Boundary::Constant { c } => *c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Boundary::Constant { c } => {
                if !(*c > 0.0) || !c.is_finite() {
                    return Err(Error::InvalidRequest(format!(
                        "boundary constant must be positive and finite, got {c}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MonitorConfig {
    /// Closed-end factor T > 1; monitoring may run to ⌊T·m⌋ + 1.
    pub t_horizon: f64,
    /// Exponent of v′ = ⌊(log m)^delta_vprime⌋, within [2, 2.5].
    pub delta_vprime: f64,
    /// Explicit boundary; `None` resolves the constant C_α by Monte Carlo.
    pub boundary: Option<Boundary>,
    pub alpha: f64,
    pub trunc: Truncation,
    pub fit: FitOptions,
    pub critval: CritvalParams,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            t_horizon: 1.5,
            delta_vprime: 2.0,
            boundary: None,
            alpha: 0.05,
            trunc: Truncation::WindowStart,
            fit: FitOptions::default(),
            critval: CritvalParams::default(),
        }
    }
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_horizon > 1.0) || !self.t_horizon.is_finite() {
            return Err(Error::InvalidRequest(format!(
                "closed-end horizon factor must be finite and above 1, got {}",
                self.t_horizon
            )));
        }
        if !(2.0..=2.5).contains(&self.delta_vprime) {
            return Err(Error::InvalidRequest(format!(
                "delta_vprime must lie in [2, 2.5], got {}",
                self.delta_vprime
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidRequest(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if let Some(b) = &self.boundary {
            b.validate()?;
        }
        Ok(())
    }
}

/// One monitoring step: detector maximum, boundary at the dominating window
/// start, their ratio, and the alarm decision.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepOutcome {
    pub k: i64,
    pub d_k: f64,
    pub threshold: f64,
    pub ratio: f64,
    pub alarm: bool,
}

/// Calibrated monitor plus everything accumulated while observations arrive.
#[derive(Debug, Clone)]
pub struct MonitorState {
    spec: ModelSpec,
    /// Historical length m (count of calibration observations).
    pub m: usize,
    /// Label of the last historical observation.
    pub history_end: i64,
    pub theta_m: IngarchParams,
    /// Î(T_{1,m})^{−1/2} Ĵ(T_{1,m}).
    pub normalizer: DMatrix<f64>,
    pub v_prime: i64,
    pub boundary: Boundary,
    pub alpha: f64,
    pub t_horizon: f64,
    /// Last label the procedure may ingest: ⌊T·m⌋ + 1 in label space.
    pub horizon: i64,
    pub critval_cache_key: String,
    pub trace: Vec<StepOutcome>,
    pub stopped_at: Option<i64>,
    /// Window fits that hit the iteration cap while monitoring.
    pub nonconverged_fits: usize,
    /// (k, ℓ) pairs whose fit failed outright and was excluded from the max.
    pub failed_windows: Vec<(i64, i64)>,
    series: CountSeries,
    trunc: Truncation,
    fit_opts: FitOptions,
    /// Warm starts per ℓ, indexed by ℓ − (history_end − v′).
    warm: Vec<Option<Vec<f64>>>,
}

/// Fits the historical window, builds the normalizer and resolves the
/// boundary. Fails hard on a non-convergent historical fit or an information
/// matrix at the eigenvalue floor.
pub fn calibrate(
    series_hist: &CountSeries,
    spec: &ModelSpec,
    config: &MonitorConfig,
    cache: Option<&CritvalCache>,
) -> Result<MonitorState> {
    config.validate()?;
    spec.validate()?;
    let d = spec.dim();
    let m = series_hist.len();
    if m < 20 * d {
        return Err(Error::SeriesTooShort {
            need: 20 * d,
            got: m,
        });
    }
    let start = series_hist.start_index();
    let history_end = series_hist.end_index();
    let hist_fit = fit(
        series_hist,
        spec,
        Window::new(start, history_end)?,
        start,
        None,
        &config.fit,
    )?;
    if !hist_fit.converged {
        return Err(Error::FitFailed(
            "historical calibration fit did not converge".into(),
        ));
    }
    let i_inv_sqrt = sym_inv_sqrt(
        &hist_fit.i_hat,
        CALIBRATION_EIG_FLOOR,
        "historical score-variance matrix",
    )?;
    let normalizer = &i_inv_sqrt * &hist_fit.j_hat;

    let v_prime = log_power_index(m, config.delta_vprime).max(d as i64 + 1);
    if v_prime >= m as i64 {
        return Err(Error::Monitor(format!(
            "v_prime = {v_prime} must stay below the history length {m}"
        )));
    }

    let (boundary, cache_key) = match config.boundary {
        Some(b) => (b, "explicit".to_string()),
        None => {
            let req = CritvalRequest::monitor(d, config.alpha, config.t_horizon, config.critval);
            let c = critvals::resolve(&req, cache)?;
            (Boundary::Constant { c }, req.cache_key())
        }
    };
    boundary.validate()?;

    let horizon = start - 1 + (config.t_horizon * m as f64).floor() as i64 + 1;
    let warm_len = (horizon - history_end + 1).max(0) as usize;

    Ok(MonitorState {
        spec: *spec,
        m,
        history_end,
        theta_m: hist_fit.theta_hat,
        normalizer,
        v_prime,
        boundary,
        alpha: config.alpha,
        t_horizon: config.t_horizon,
        horizon,
        critval_cache_key: cache_key,
        trace: Vec::new(),
        stopped_at: None,
        nonconverged_fits: 0,
        failed_windows: Vec::new(),
        series: series_hist.clone(),
        trunc: config.trunc,
        fit_opts: config.fit.clone(),
        warm: vec![None; warm_len],
    })
}

impl MonitorState {
    /// All data seen so far (history plus monitored observations).
    pub fn series(&self) -> &CountSeries {
        &self.series
    }

    /// Label of the newest ingested observation.
    pub fn current_k(&self) -> i64 {
        self.series.end_index()
    }

    /// Admissible window starts Π at monitoring instant k.
    pub fn pi_range(&self, k: i64) -> Result<(i64, i64)> {
        if k <= self.history_end {
            return Err(Error::Monitor(format!(
                "monitoring instant {k} is not after the history end {}",
                self.history_end
            )));
        }
        Ok((self.history_end - self.v_prime, k - self.v_prime))
    }

    /// D_{k,ℓ} given the window estimate: √m ((k−ℓ)/k) ‖normalizer · Δθ‖.
    pub fn detector_from_estimate(&self, k: i64, ell: i64, theta_lk: &IngarchParams) -> f64 {
        let count_k = (k - self.series.start_index() + 1) as f64;
        let diff = DVector::from_vec(theta_lk.to_vec()) - DVector::from_vec(self.theta_m.to_vec());
        (self.m as f64).sqrt() * ((k - ell) as f64 / count_k) * (&self.normalizer * diff).norm()
    }

    /// Ingests one observation and decides continue/alarm.
    pub fn step(&mut self, y: u64) -> Result<StepOutcome> {
        if let Some(at) = self.stopped_at {
            return Err(Error::Monitor(format!("procedure already stopped at {at}")));
        }
        let k = self.series.end_index() + 1;
        if k > self.horizon {
            return Err(Error::Monitor(format!(
                "monitoring instant {k} is past the closed-end horizon {}",
                self.horizon
            )));
        }
        self.series.push(y);
        let (ell_lo, ell_hi) = self.pi_range(k)?;

        let mut d_k = 0.0f64;
        let mut best_ratio = f64::NEG_INFINITY;
        let mut threshold = f64::NAN;
        for ell in ell_lo..=ell_hi {
            let idx = (ell - ell_lo) as usize;
            let init = match &self.warm[idx] {
                Some(v) => Some(IngarchParams::from_slice(&self.spec, v)?),
                None => match idx.checked_sub(1).and_then(|p| self.warm[p].clone()) {
                    Some(v) => Some(IngarchParams::from_slice(&self.spec, &v)?),
                    None => None,
                },
            };
            let window = Window::new(ell, k)?;
            let trunc_at = self.trunc.resolve(self.series.start_index(), ell);
            let res = match fit(
                &self.series,
                &self.spec,
                window,
                trunc_at,
                init.as_ref(),
                &self.fit_opts,
            ) {
                Ok(r) => r,
                Err(_) => {
                    self.failed_windows.push((k, ell));
                    continue;
                }
            };
            if !res.converged {
                self.nonconverged_fits += 1;
            }
            self.warm[idx] = Some(res.theta_hat.to_vec());
            let d_val = self.detector_from_estimate(k, ell, &res.theta_hat);
            let b = self.boundary.value((k - ell) as f64 / self.m as f64);
            d_k = d_k.max(d_val);
            let ratio = d_val / b;
            if ratio > best_ratio {
                best_ratio = ratio;
                threshold = b;
            }
        }

        let alarm = best_ratio > 1.0;
        if alarm {
            self.stopped_at = Some(k);
        }
        let out = StepOutcome {
            k,
            d_k,
            threshold,
            ratio: best_ratio,
            alarm,
        };
        self.trace.push(out);
        Ok(out)
    }

    /// True once no further step may be taken (alarm or horizon).
    pub fn finished(&self) -> bool {
        self.stopped_at.is_some() || self.series.end_index() >= self.horizon
    }

    /// Detector trace as `k,d_k` CSV.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("k,d_k\n");
        for s in &self.trace {
            out.push_str(&format!("{},{}\n", s.k, s.d_k));
        }
        out
    }

    /// Serializable summary of the calibrated state and monitoring outcome.
    pub fn report(&self) -> MonitorReport {
        MonitorReport {
            schema: "ingarch-cpd/monitor/v1",
            m: self.m,
            history_end: self.history_end,
            t_horizon: self.t_horizon,
            alpha: self.alpha,
            v_prime: self.v_prime,
            horizon: self.horizon,
            boundary: self.boundary,
            critval_cache_key: self.critval_cache_key.clone(),
            theta_m: self.theta_m.clone(),
            stopped_at: self.stopped_at,
            steps: self.trace.len(),
            nonconverged_fits: self.nonconverged_fits,
            failed_windows: self.failed_windows.len(),
            trace: self.trace.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MonitorReport {
    pub schema: &'static str,
    pub m: usize,
    pub history_end: i64,
    pub t_horizon: f64,
    pub alpha: f64,
    pub v_prime: i64,
    pub horizon: i64,
    pub boundary: Boundary,
    pub critval_cache_key: String,
    pub theta_m: IngarchParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stopped_at: Option<i64>,
    pub steps: usize,
    pub nonconverged_fits: usize,
    pub failed_windows: usize,
    pub trace: Vec<StepOutcome>,
}

/// Single detector evaluation with a fresh (multi-start) window fit; the
/// incremental path through [`MonitorState::step`] must agree with this.
pub fn detector(
    state: &MonitorState,
    series_full: &CountSeries,
    spec: &ModelSpec,
    k: i64,
    ell: i64,
) -> Result<f64> {
    let (ell_lo, ell_hi) = state.pi_range(k)?;
    if !(ell_lo..=ell_hi).contains(&ell) {
        return Err(Error::Monitor(format!(
            "window start {ell} outside the admissible set [{ell_lo}, {ell_hi}]"
        )));
    }
    let window = Window::new(ell, k)?;
    let trunc_at = state.trunc.resolve(series_full.start_index(), ell);
    let res = fit(series_full, spec, window, trunc_at, None, &state.fit_opts)?;
    Ok(state.detector_from_estimate(k, ell, &res.theta_hat))
}

/// Drives calibration and stepping until alarm, stream end or horizon.
pub fn run_closed_end<I: IntoIterator<Item = u64>>(
    series_hist: &CountSeries,
    stream: I,
    spec: &ModelSpec,
    config: &MonitorConfig,
    cache: Option<&CritvalCache>,
) -> Result<MonitorState> {
    let mut state = calibrate(series_hist, spec, config, cache)?;
    for y in stream {
        if state.finished() {
            break;
        }
        state.step(y)?;
    }
    Ok(state)
}

/// Alarm classification against a known change point (simulation mode).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum AlarmOutcome {
    /// Stopped after the change: detection delay τ(m) − k*.
    TrueAlarm { at: i64, delay: i64 },
    /// Stopped at or before the change.
    FalseAlarm { at: i64 },
    /// Horizon reached without an alarm.
    NoAlarm,
}

pub fn classify_alarm(state: &MonitorState, k_star_label: i64) -> AlarmOutcome {
    match state.stopped_at {
        Some(at) if at > k_star_label => AlarmOutcome::TrueAlarm {
            at,
            delay: at - k_star_label,
        },
        Some(at) => AlarmOutcome::FalseAlarm { at },
        None => AlarmOutcome::NoAlarm,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{simulate, simulate_piecewise};
    use approx::assert_relative_eq;

    fn params(alpha0: f64, alphas: &[f64], betas: &[f64]) -> IngarchParams {
        IngarchParams::new(alpha0, alphas.to_vec(), betas.to_vec()).unwrap()
    }

    fn config_with_c(c: f64) -> MonitorConfig {
        MonitorConfig {
            boundary: Some(Boundary::Constant { c }),
            ..MonitorConfig::default()
        }
    }

    #[test]
    fn v_prime_hand_value() {
        // ⌊(log 1000)²⌋ = 47 with the natural log.
        assert_eq!(log_power_index(1000, 2.0), 47);
    }

    #[test]
    fn pi_set_bookkeeping() {
        let spec = ModelSpec::poisson(1, 0).unwrap();
        let theta = params(1.0, &[0.3], &[]);
        let hist = simulate(&spec, &theta, 200, 100, 5).unwrap();
        let state = calibrate(&hist, &spec, &config_with_c(10.0), None).unwrap();
        for k in [201i64, 230, 290] {
            let (lo, hi) = state.pi_range(k).unwrap();
            assert_eq!(lo, 200 - state.v_prime);
            assert_eq!(hi, k - state.v_prime);
            // |Π_{m,k}| = k − m + 1, and every window has at least v′+1 points.
            assert_eq!(hi - lo + 1, k - 200 + 1);
            assert!(k - hi >= state.v_prime);
        }
        assert!(state.pi_range(200).is_err());
    }

    #[test]
    fn detector_is_zero_at_the_historical_estimate() {
        let spec = ModelSpec::poisson(1, 0).unwrap();
        let theta = params(1.0, &[0.3], &[]);
        let hist = simulate(&spec, &theta, 200, 100, 6).unwrap();
        let state = calibrate(&hist, &spec, &config_with_c(10.0), None).unwrap();
        let d = state.detector_from_estimate(250, 180, &state.theta_m.clone());
        assert_relative_eq!(d, 0.0);
        // And strictly positive for any other estimate.
        let other = params(1.4, &[0.3], &[]);
        assert!(state.detector_from_estimate(250, 180, &other) > 0.0);
    }

    #[test]
    fn huge_boundary_never_alarms() {
        let spec = ModelSpec::poisson(1, 0).unwrap();
        let theta = params(1.0, &[0.3], &[]);
        let all = simulate(&spec, &theta, 280, 100, 7).unwrap();
        let hist = all.prefix(200).unwrap();
        let stream = all.values()[200..].to_vec();
        let state = run_closed_end(&hist, stream, &spec, &config_with_c(1e6), None).unwrap();
        assert!(state.stopped_at.is_none());
        assert_eq!(state.trace.len(), 80);
    }

    #[test]
    fn obvious_break_raises_an_alarm_after_the_change() {
        let spec = ModelSpec::poisson(1, 0).unwrap();
        let t0 = params(1.0, &[0.2], &[]);
        let t1 = params(8.0, &[0.2], &[]);
        // 200 history + change at 250, monitored to 300.
        let all = simulate_piecewise(&spec, &t0, Some((&t1, 250)), 300, 200, 8).unwrap();
        let hist = all.prefix(200).unwrap();
        let stream = all.values()[200..].to_vec();
        let state = run_closed_end(&hist, stream, &spec, &config_with_c(2.5), None).unwrap();
        let stopped = state.stopped_at.expect("should alarm");
        assert!(stopped > 250, "alarm at {stopped}");
        match classify_alarm(&state, 250) {
            AlarmOutcome::TrueAlarm { delay, .. } => assert!(delay <= 30, "delay {delay}"),
            other => panic!("unexpected outcome {other:?}"),
        }
    }

    #[test]
    fn alarm_decision_depends_only_on_observed_prefix() {
        let spec = ModelSpec::poisson(1, 0).unwrap();
        let t0 = params(1.0, &[0.2], &[]);
        let t1 = params(5.0, &[0.2], &[]);
        let all = simulate_piecewise(&spec, &t0, Some((&t1, 240)), 300, 200, 9).unwrap();
        let hist = all.prefix(200).unwrap();
        let stream: Vec<u64> = all.values()[200..].to_vec();
        let full = run_closed_end(&hist, stream.clone(), &spec, &config_with_c(2.5), None)
            .unwrap();
        for cut in [10usize, 40, 70] {
            let partial = run_closed_end(
                &hist,
                stream[..cut].to_vec(),
                &spec,
                &config_with_c(2.5),
                None,
            )
            .unwrap();
            let take = partial.trace.len();
            for (a, b) in partial.trace.iter().zip(full.trace.iter().take(take)) {
                assert_eq!(a.k, b.k);
                assert_eq!(a.d_k.to_bits(), b.d_k.to_bits());
                assert_eq!(a.alarm, b.alarm);
            }
        }
    }

    #[test]
    fn raising_the_boundary_never_stops_earlier() {
        let spec = ModelSpec::poisson(1, 0).unwrap();
        let t0 = params(1.0, &[0.2], &[]);
        let t1 = params(4.0, &[0.2], &[]);
        let all = simulate_piecewise(&spec, &t0, Some((&t1, 230)), 300, 200, 10).unwrap();
        let hist = all.prefix(200).unwrap();
        let stream: Vec<u64> = all.values()[200..].to_vec();
        let low = run_closed_end(&hist, stream.clone(), &spec, &config_with_c(1.5), None)
            .unwrap();
        let high = run_closed_end(&hist, stream, &spec, &config_with_c(2.5), None).unwrap();
        match (low.stopped_at, high.stopped_at) {
            (Some(a), Some(b)) => assert!(b >= a),
            (None, Some(_)) => panic!("higher boundary alarmed while lower did not"),
            _ => {}
        }
    }

    #[test]
    fn calibration_is_deterministic_and_poisson_normalizer_is_sqrt_j() {
        let spec = ModelSpec::poisson(1, 1).unwrap();
        let theta = params(0.4, &[0.15], &[0.2]);
        let hist = simulate(&spec, &theta, 5000, 500, 11).unwrap();
        let a = calibrate(&hist, &spec, &config_with_c(3.0), None).unwrap();
        let b = calibrate(&hist, &spec, &config_with_c(3.0), None).unwrap();
        assert_eq!(a.theta_m, b.theta_m);
        assert_eq!(a.normalizer, b.normalizer);
        // Under Poisson truth Î ≈ Ĵ, so Î^{−1/2} Ĵ ≈ Ĵ^{1/2}.
        let hist_fit = fit(
            &hist,
            &spec,
            Window::new(1, 5000).unwrap(),
            1,
            None,
            &FitOptions::default(),
        )
        .unwrap();
        let sqrt_j = crate::linalg::sym_sqrt(&hist_fit.j_hat);
        let rel = (&a.normalizer - &sqrt_j).norm() / sqrt_j.norm();
        assert!(rel < 0.15, "relative distance {rel}");
    }

    #[test]
    fn step_errors_after_alarm_and_past_horizon() {
        let spec = ModelSpec::poisson(1, 0).unwrap();
        let theta = params(1.0, &[0.3], &[]);
        let hist = simulate(&spec, &theta, 100, 100, 12).unwrap();
        // Horizon ⌊1.1·100⌋ + 1 = 111 caps the run at 11 steps.
        let config = MonitorConfig {
            t_horizon: 1.1,
            ..config_with_c(1e6)
        };
        let mut state = calibrate(&hist, &spec, &config, None).unwrap();
        for y in [1u64; 11] {
            state.step(y).unwrap();
        }
        assert!(state.finished());
        assert!(state.step(1).is_err());
    }

    #[test]
    fn incremental_and_fresh_detector_agree() {
        let spec = ModelSpec::poisson(1, 0).unwrap();
        let theta = params(1.0, &[0.3], &[]);
        let all = simulate(&spec, &theta, 260, 100, 13).unwrap();
        let hist = all.prefix(200).unwrap();
        let mut state = calibrate(&hist, &spec, &config_with_c(1e6), None).unwrap();
        for &y in &all.values()[200..230] {
            state.step(y).unwrap();
        }
        let k = 230;
        let (lo, hi) = state.pi_range(k).unwrap();
        let mut fresh_max = 0.0f64;
        for ell in lo..=hi {
            fresh_max = fresh_max.max(detector(&state, state.series(), &spec, k, ell).unwrap());
        }
        let warm_max = state.trace.last().unwrap().d_k;
        assert_relative_eq!(warm_max, fresh_max, max_relative = 1e-5);
    }

    #[test]
    fn calibrate_rejects_short_history() {
        let spec = ModelSpec::poisson(1, 1).unwrap();
        let theta = params(1.0, &[0.2], &[0.1]);
        let hist = simulate(&spec, &theta, 30, 50, 14).unwrap();
        assert!(calibrate(&hist, &spec, &config_with_c(2.0), None).is_err());
    }
}
