//! Batched simulation experiments: empirical level/power of both tests and
//! detection-delay statistics, with per-replication derived seeds so results
//! are independent of scheduling.

use rayon::prelude::*;
use serde::Serialize;

use crate::critvals::{self, CritvalCache, CritvalRequest};
use crate::derive_seed;
use crate::error::Result;
use crate::model::{simulate_piecewise, IngarchParams, ModelSpec};
use crate::retrospective::{scan_with_critical_value, RetroConfig};
use crate::sequential::{classify_alarm, run_closed_end, AlarmOutcome, Boundary, MonitorConfig};

/// Fraction of non-convergent window fits above which one replication counts
/// as failed, and fraction of failed replications above which a cell is
/// flagged.
const REP_FAIL_FRACTION: f64 = 0.05;
const CELL_FLAG_FRACTION: f64 = 0.10;

/// One retrospective experiment cell: fixed model, sample size and optional
/// mid-sample change, replicated `reps` times.
#[derive(Debug, Clone)]
pub struct RetroCell {
    pub spec: ModelSpec,
    pub theta0: IngarchParams,
    /// Change to `theta1` after observation `k_star` (1-based) under H₁.
    pub change: Option<(IngarchParams, usize)>,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub burnin: usize,
    pub config: RetroConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct RetroCellReport {
    pub n: usize,
    pub reps: usize,
    /// Empirical level under H₀, empirical power under H₁.
    pub reject_rate: f64,
    /// Binomial Monte-Carlo standard error of the rate.
    pub mc_se: f64,
    pub critical_value: f64,
    /// Replications with a noticeable share of non-convergent window fits.
    pub failed_reps: usize,
    pub flagged: bool,
    /// Breakpoint estimates of the rejecting replications.
    pub t_hats: Vec<i64>,
}

pub fn run_retro_cell(cell: &RetroCell, cache: Option<&CritvalCache>) -> Result<RetroCellReport> {
    cell.config.validate()?;
    let req = CritvalRequest::bridge(
        cell.spec.dim(),
        cell.config.alpha,
        cell.config.weight,
        cell.config.critval,
    );
    let critical_value = critvals::resolve(&req, cache)?;
    let cache_key = req.cache_key();

    let outcomes: Vec<(bool, Option<i64>, bool)> = (0..cell.reps)
        .into_par_iter()
        .map(|rep| -> Result<(bool, Option<i64>, bool)> {
            let seed = derive_seed(cell.seed, rep as u64);
            let change = cell.change.as_ref().map(|(t1, k)| (t1, *k));
            let series =
                simulate_piecewise(&cell.spec, &cell.theta0, change, cell.n, cell.burnin, seed)?;
            let report = scan_with_critical_value(
                &series,
                &cell.spec,
                &cell.config,
                critical_value,
                cache_key.clone(),
            )?;
            let splits = report.profile.len().max(1);
            let rep_failed = !report.sigma_fits_converged.iter().all(|&c| c)
                || report.nonconverged_ks.len() as f64 > REP_FAIL_FRACTION * splits as f64;
            Ok((report.reject, report.t_hat, rep_failed))
        })
        .collect::<Result<Vec<_>>>()?;

    let rejects = outcomes.iter().filter(|o| o.0).count();
    let failed_reps = outcomes.iter().filter(|o| o.2).count();
    let rate = rejects as f64 / cell.reps as f64;
    Ok(RetroCellReport {
        n: cell.n,
        reps: cell.reps,
        reject_rate: rate,
        mc_se: (rate * (1.0 - rate) / cell.reps as f64).sqrt(),
        critical_value,
        failed_reps,
        flagged: failed_reps as f64 > CELL_FLAG_FRACTION * cell.reps as f64,
        t_hats: outcomes.iter().filter_map(|o| o.1).collect(),
    })
}

/// One sequential experiment cell: history of length m, monitoring period
/// {m+1, …, ⌊T·m⌋}, optional change after observation `k_star`.
#[derive(Debug, Clone)]
pub struct SeqCell {
    pub spec: ModelSpec,
    pub theta0: IngarchParams,
    pub change: Option<(IngarchParams, usize)>,
    pub m: usize,
    pub reps: usize,
    pub seed: u64,
    pub burnin: usize,
    pub config: MonitorConfig,
}

/// Elementary statistics of the detection delay over true alarms; quartiles
/// use the nearest-rank convention on the sorted delays.
#[derive(Debug, Clone, Serialize)]
pub struct DelayStats {
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
    pub min: i64,
    pub q1: i64,
    pub median: i64,
    pub q3: i64,
    pub max: i64,
}

impl DelayStats {
    pub fn from_delays(mut delays: Vec<i64>) -> Option<Self> {
        if delays.is_empty() {
            return None;
        }
        delays.sort_unstable();
        let n = delays.len();
        let rank = |p: f64| delays[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
        let mean = delays.iter().sum::<i64>() as f64 / n as f64;
        let var = delays
            .iter()
            .map(|&d| (d as f64 - mean).powi(2))
            .sum::<f64>()
            / (n as f64 - 1.0).max(1.0);
        Some(Self {
            count: n,
            mean,
            sd: var.sqrt(),
            min: delays[0],
            q1: rank(0.25),
            median: rank(0.5),
            q3: rank(0.75),
            max: delays[n - 1],
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeqCellReport {
    pub m: usize,
    pub reps: usize,
    /// Fraction of replications that stopped (level under H₀, power under H₁).
    pub alarm_rate: f64,
    pub mc_se: f64,
    pub boundary_c: f64,
    pub true_alarms: usize,
    pub false_alarms: usize,
    pub no_alarms: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delays: Option<DelayStats>,
    pub failed_reps: usize,
    pub flagged: bool,
}

pub fn run_seq_cell(cell: &SeqCell, cache: Option<&CritvalCache>) -> Result<SeqCellReport> {
    cell.config.validate()?;
    let boundary_c = match cell.config.boundary {
        Some(Boundary::Constant { c }) => c,
        None => {
            let req = CritvalRequest::monitor(
                cell.spec.dim(),
                cell.config.alpha,
                cell.config.t_horizon,
                cell.config.critval,
            );
            critvals::resolve(&req, cache)?
        }
    };
    let run_config = MonitorConfig {
        boundary: Some(Boundary::Constant { c: boundary_c }),
        ..cell.config.clone()
    };
    // Stream covers the monitoring period {m+1, …, ⌊T·m⌋}.
    let total = (cell.config.t_horizon * cell.m as f64).floor() as usize;

    let outcomes: Vec<(AlarmOutcome, bool)> = (0..cell.reps)
        .into_par_iter()
        .map(|rep| -> Result<(AlarmOutcome, bool)> {
            let seed = derive_seed(cell.seed, rep as u64);
            let change = cell.change.as_ref().map(|(t1, k)| (t1, *k));
            let all =
                simulate_piecewise(&cell.spec, &cell.theta0, change, total, cell.burnin, seed)?;
            let hist = all.prefix(cell.m)?;
            let stream = all.values()[cell.m..].to_vec();
            let state = run_closed_end(&hist, stream, &cell.spec, &run_config, None)?;
            let monitored_fits: usize = state.trace.len().max(1);
            let rep_failed = !state.failed_windows.is_empty()
                || state.nonconverged_fits as f64
                    > REP_FAIL_FRACTION * (monitored_fits * monitored_fits) as f64;
            let k_star_label = cell
                .change
                .as_ref()
                .map(|(_, k)| *k as i64)
                .unwrap_or(i64::MAX);
            Ok((classify_alarm(&state, k_star_label), rep_failed))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut true_alarms = 0;
    let mut false_alarms = 0;
    let mut no_alarms = 0;
    let mut delays = Vec::new();
    for (outcome, _) in &outcomes {
        match outcome {
            AlarmOutcome::TrueAlarm { delay, .. } => {
                true_alarms += 1;
                delays.push(*delay);
            }
            AlarmOutcome::FalseAlarm { .. } => false_alarms += 1,
            AlarmOutcome::NoAlarm => no_alarms += 1,
        }
    }
    let failed_reps = outcomes.iter().filter(|o| o.1).count();
    let alarms = true_alarms + false_alarms;
    let rate = alarms as f64 / cell.reps as f64;
    Ok(SeqCellReport {
        m: cell.m,
        reps: cell.reps,
        alarm_rate: rate,
        mc_se: (rate * (1.0 - rate) / cell.reps as f64).sqrt(),
        boundary_c,
        true_alarms,
        false_alarms,
        no_alarms,
        delays: DelayStats::from_delays(delays),
        failed_reps,
        flagged: failed_reps as f64 > CELL_FLAG_FRACTION * cell.reps as f64,
    })
}
