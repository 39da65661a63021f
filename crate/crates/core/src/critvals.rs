//! Monte-Carlo quantiles of the limit functionals behind both tests.
//!
//! Two functionals are shipped:
//!
//! - `BridgeSupSq`: sup_{0<τ<1} ‖W_d(τ)‖² / q²(τ) for a d-dimensional
//!   Brownian bridge, calibrating the retrospective scan;
//! - `MonitorSup`: U_{d,T} = sup_{1<t≤T} sup_{1<s<t} (1/t) ‖W_d(s) − s W_d(1)‖
//!   for a d-dimensional standard Brownian motion, calibrating the
//!   closed-end monitor with a constant boundary.
//!
//! Paths are discretized with `grid` points per unit time (Gaussian
//! increments scaled by 1/√grid); suprema are evaluated on interior grid
//! points, so the discretization bias is downward and shrinks as the grid
//! refines. Every (path, coordinate) pair draws from its own stream derived
//! from the master seed, which makes results independent of scheduling and
//! the suprema pathwise monotone in both the horizon and the dimension.
//!
//! Quantiles are cached in a small fixed-width key-value file (one line of
//! `sha256(key) value-bits`, both hex) keyed by the full request, so repeated
//! runs are bit-exact without resimulation.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::retrospective::{weight_q, WeightFn};

/// Default master seed for critical-value simulation; fixed so that reports
/// are reproducible when the caller does not choose one.
pub const DEFAULT_CRITVAL_SEED: u64 = 42;

/// Grid/path sizes for an embedded critical-value computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CritvalParams {
    pub grid: usize,
    pub paths: usize,
    pub seed: u64,
}

impl Default for CritvalParams {
    fn default() -> Self {
        Self {
            grid: 10_000,
            paths: 100_000,
            seed: DEFAULT_CRITVAL_SEED,
        }
    }
}

/// Limit functional whose (1−α)-quantile is requested.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Functional {
    BridgeSupSq { weight: WeightFn },
    MonitorSup { t_horizon: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CritvalRequest {
    pub d: usize,
    pub alpha: f64,
    pub functional: Functional,
    /// Grid points per unit time.
    pub grid: usize,
    /// Path replications.
    pub paths: usize,
    pub seed: u64,
}

impl CritvalRequest {
    pub fn bridge(d: usize, alpha: f64, weight: WeightFn, params: CritvalParams) -> Self {
        Self {
            d,
            alpha,
            functional: Functional::BridgeSupSq { weight },
            grid: params.grid,
            paths: params.paths,
            seed: params.seed,
        }
    }

    pub fn monitor(d: usize, alpha: f64, t_horizon: f64, params: CritvalParams) -> Self {
        Self {
            d,
            alpha,
            functional: Functional::MonitorSup { t_horizon },
            grid: params.grid,
            paths: params.paths,
            seed: params.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidRequest("dimension must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidRequest(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.grid < 2 || self.paths < 2 {
            return Err(Error::InvalidRequest(
                "grid and paths must both be at least 2".into(),
            ));
        }
        match &self.functional {
            Functional::BridgeSupSq { weight } => weight.validate(),
            Functional::MonitorSup { t_horizon } => {
                if !(*t_horizon > 1.0) || !t_horizon.is_finite() {
                    return Err(Error::InvalidRequest(format!(
                        "closed-end horizon must be finite and above 1, got {t_horizon}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Canonical key; floats enter as exact bit patterns.
    pub fn cache_key(&self) -> String {
        let functional = match &self.functional {
            Functional::BridgeSupSq { weight } => {
                format!("bridge|w={}", weight.key_fragment())
            }
            Functional::MonitorSup { t_horizon } => {
                format!("monitor|T={:016x}", t_horizon.to_bits())
            }
        };
        format!(
            "v1|{functional}|d={}|alpha={:016x}|N={}|R={}|seed={}",
            self.d,
            self.alpha.to_bits(),
            self.grid,
            self.paths,
            self.seed
        )
    }
}

/// Quantile plus its Monte-Carlo standard error.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CritvalEstimate {
    pub value: f64,
    pub mc_se: f64,
}

/// Simulates all path statistics for the request and returns them sorted.
pub fn simulate_statistics(req: &CritvalRequest) -> Result<Vec<f64>> {
    req.validate()?;
    let mut stats: Vec<f64> = (0..req.paths)
        .into_par_iter()
        .map_init(Vec::new, |buf, path| path_statistic(req, path as u64, buf))
        .collect::<Result<Vec<f64>>>()?;
    stats.sort_by(|a, b| a.partial_cmp(b).expect("statistics are finite"));
    Ok(stats)
}

fn path_statistic(req: &CritvalRequest, path: u64, buf: &mut Vec<f64>) -> Result<f64> {
    match &req.functional {
        Functional::BridgeSupSq { weight } => {
            bridge_path_stat(req.d, req.grid, weight, req.seed, path, buf).map(|(_, fine)| fine)
        }
        Functional::MonitorSup { t_horizon } => {
            Ok(monitor_path_stat(req.d, req.grid, *t_horizon, req.seed, path))
        }
    }
}

fn coord_rng(master: u64, path: u64, coord: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(master, path), coord as u64))
}

/// Bridge sup statistic on the full grid, together with the same statistic
/// restricted to every other grid point (the embedded half grid, used by the
/// grid-convergence diagnostics).
fn bridge_path_stat(
    d: usize,
    grid: usize,
    weight: &WeightFn,
    seed: u64,
    path: u64,
    buf: &mut Vec<f64>,
) -> Result<(f64, f64)> {
    let n = grid;
    buf.clear();
    buf.resize(d * n, 0.0);
    for coord in 0..d {
        let mut rng = coord_rng(seed, path, coord);
        let row = &mut buf[coord * n..(coord + 1) * n];
        let mut sum = 0.0;
        for v in row.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            sum += z;
            *v = sum;
        }
    }
    let inv_n = 1.0 / n as f64;
    let mut sup_full = 0.0f64;
    let mut sup_half = 0.0f64;
    for i in 1..n {
        let t = i as f64 * inv_n;
        let mut norm_sq = 0.0;
        for coord in 0..d {
            let s_i = buf[coord * n + i - 1];
            let s_n = buf[coord * n + n - 1];
            let b = s_i - t * s_n;
            norm_sq += b * b;
        }
        norm_sq *= inv_n;
        let q = weight_q(t, weight)?;
        if q > 0.0 {
            let val = norm_sq / (q * q);
            sup_full = sup_full.max(val);
            if i % 2 == 0 {
                sup_half = sup_half.max(val);
            }
        }
    }
    Ok((sup_half, sup_full))
}

/// U_{d,T} on the grid: single pass keeping the running max of
/// g(s) = ‖W(s) − s W(1)‖ over 1 < s < t.
fn monitor_path_stat(d: usize, grid: usize, t_horizon: f64, seed: u64, path: u64) -> f64 {
    let n = grid;
    let m = (n as f64 * t_horizon).floor() as usize;
    let mut rngs: Vec<ChaCha8Rng> = (0..d).map(|c| coord_rng(seed, path, c)).collect();
    let mut sums = vec![0.0f64; d];
    let mut w1 = vec![0.0f64; d];
    let inv_sqrt_n = (n as f64).sqrt().recip();
    let mut running_max = f64::NEG_INFINITY;
    let mut sup = 0.0f64;
    for i in 1..=m {
        for (s, rng) in sums.iter_mut().zip(rngs.iter_mut()) {
            let z: f64 = StandardNormal.sample(rng);
            *s += z;
        }
        if i == n {
            w1.copy_from_slice(&sums);
        }
        if i > n {
            let t = i as f64 / n as f64;
            if running_max > f64::NEG_INFINITY {
                sup = sup.max(running_max / t);
            }
            let g = sums
                .iter()
                .zip(&w1)
                .map(|(s, w)| {
                    let v = (s - t * w) * inv_sqrt_n;
                    v * v
                })
                .sum::<f64>()
                .sqrt();
            running_max = running_max.max(g);
        }
    }
    sup
}

/// Empirical (1−α)-quantile: order statistic at ⌈(1−α)·paths⌉.
fn empirical_quantile(sorted: &[f64], alpha: f64) -> f64 {
    let r = sorted.len();
    let idx = ((1.0 - alpha) * r as f64).ceil() as usize;
    sorted[idx.clamp(1, r) - 1]
}

/// Quantile with a density-based Monte-Carlo standard error
/// √(α(1−α)/R) / f̂(ξ), the density estimated from a symmetric span of order
/// statistics around the quantile.
pub fn quantile_with_se(req: &CritvalRequest) -> Result<CritvalEstimate> {
    let sorted = simulate_statistics(req)?;
    let value = empirical_quantile(&sorted, req.alpha);
    Ok(CritvalEstimate {
        value,
        mc_se: quantile_se(&sorted, req.alpha),
    })
}

fn quantile_se(sorted: &[f64], alpha: f64) -> f64 {
    let r = sorted.len();
    let idx = (((1.0 - alpha) * r as f64).ceil() as usize).clamp(1, r);
    let span = ((0.5 * (r as f64).sqrt()) as usize).max(1);
    let lo = idx.saturating_sub(span).max(1);
    let hi = (idx + span).min(r);
    let dx = sorted[hi - 1] - sorted[lo - 1];
    if dx <= 0.0 {
        return 0.0;
    }
    let density = ((hi - lo) as f64 / r as f64) / dx;
    (alpha * (1.0 - alpha) / r as f64).sqrt() / density
}

/// (1−α)-quantile of sup ‖W_d(τ)‖²/q²(τ).
pub fn bridge_sup_quantile(req: &CritvalRequest) -> Result<f64> {
    match req.functional {
        Functional::BridgeSupSq { .. } => Ok(quantile_with_se(req)?.value),
        _ => Err(Error::InvalidRequest(
            "bridge_sup_quantile needs a BridgeSupSq functional".into(),
        )),
    }
}

/// (1−α)-quantile of U_{d,T}.
pub fn monitor_sup_quantile(req: &CritvalRequest) -> Result<f64> {
    match req.functional {
        Functional::MonitorSup { .. } => Ok(quantile_with_se(req)?.value),
        _ => Err(Error::InvalidRequest(
            "monitor_sup_quantile needs a MonitorSup functional".into(),
        )),
    }
}

/// Bridge quantile on the full grid and on the embedded half grid evaluated
/// over the same paths; the pair isolates pure discretization error.
pub fn bridge_quantile_grid_pair(req: &CritvalRequest) -> Result<(f64, f64)> {
    req.validate()?;
    let weight = match &req.functional {
        Functional::BridgeSupSq { weight } => *weight,
        _ => {
            return Err(Error::InvalidRequest(
                "grid pair is defined for the bridge functional".into(),
            ))
        }
    };
    if req.grid % 2 != 0 {
        return Err(Error::InvalidRequest("grid pair needs an even grid".into()));
    }
    let pairs: Vec<(f64, f64)> = (0..req.paths)
        .into_par_iter()
        .map_init(Vec::new, |buf, path| {
            bridge_path_stat(req.d, req.grid, &weight, req.seed, path as u64, buf)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut half: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut full: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    half.sort_by(|a, b| a.partial_cmp(b).unwrap());
    full.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((
        empirical_quantile(&half, req.alpha),
        empirical_quantile(&full, req.alpha),
    ))
}

/// Resolves a quantile through the cache when one is supplied.
pub fn resolve(req: &CritvalRequest, cache: Option<&CritvalCache>) -> Result<f64> {
    match cache {
        Some(cache) => cache.get_or_compute(req).map(|(v, _)| v),
        None => Ok(quantile_with_se(req)?.value),
    }
}

const CACHE_HEADER: &str = "ingarch-cpd critval cache v1";
/// Name of the environment variable pointing at the cache directory.
pub const CACHE_DIR_ENV: &str = "INGARCH_CPD_CACHE_DIR";

/// Content-addressed quantile cache: one fixed-width record per request,
/// `sha256(cache_key) <space> f64-bits`, both lowercase hex, under a
/// versioned header line. Malformed records are dropped and rewritten on the
/// next store.
#[derive(Debug, Clone)]
pub struct CritvalCache {
    path: PathBuf,
}

impl CritvalCache {
    pub fn new(dir: &Path) -> Self {
        Self {
            path: dir.join("critvals.cache"),
        }
    }

    /// Cache under `$INGARCH_CPD_CACHE_DIR`, else the given default directory.
    pub fn from_env_or(default_dir: &Path) -> Self {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) => Self::new(Path::new(&dir)),
            None => Self::new(default_dir),
        }
    }

    pub fn file_path(&self) -> &Path {
        &self.path
    }

    fn key_hash(req: &CritvalRequest) -> String {
        let mut hasher = Sha256::new();
        hasher.update(req.cache_key().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn load(&self) -> HashMap<String, f64> {
        let mut map = HashMap::new();
        let Ok(content) = std::fs::read_to_string(&self.path) else {
            return map;
        };
        let mut lines = content.lines();
        if lines.next() != Some(CACHE_HEADER) {
            return map;
        }
        for line in lines {
            // 64 hex chars, space, 16 hex chars: anything else is corrupt
            // and silently dropped (recomputed, overwritten on store).
            if line.len() != 81 {
                continue;
            }
            let (hash, rest) = line.split_at(64);
            let Some(bits_hex) = rest.strip_prefix(' ') else {
                continue;
            };
            if !hash.chars().all(|c| c.is_ascii_hexdigit()) {
                continue;
            }
            let Ok(bits) = u64::from_str_radix(bits_hex, 16) else {
                continue;
            };
            let value = f64::from_bits(bits);
            if value.is_finite() {
                map.insert(hash.to_string(), value);
            }
        }
        map
    }

    pub fn lookup(&self, req: &CritvalRequest) -> Option<f64> {
        self.load().get(&Self::key_hash(req)).copied()
    }

    pub fn store(&self, req: &CritvalRequest, value: f64) -> Result<()> {
        let mut map = self.load();
        map.insert(Self::key_hash(req), value);
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = self.path.with_extension("cache.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            writeln!(f, "{CACHE_HEADER}")?;
            let mut entries: Vec<_> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            for (hash, v) in entries {
                writeln!(f, "{hash} {:016x}", v.to_bits())?;
            }
        }
        std::fs::rename(&tmp, &self.path)?;
        Ok(())
    }

    /// Cached value, or simulate, store and return it. The flag reports a
    /// cache hit.
    pub fn get_or_compute(&self, req: &CritvalRequest) -> Result<(f64, bool)> {
        if let Some(v) = self.lookup(req) {
            return Ok((v, true));
        }
        let est = quantile_with_se(req)?;
        self.store(req, est.value)?;
        Ok((est.value, false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 0.95 quantile of sup|B| via the alternating series
    /// P(sup|B| > x) = 2 Σ_{k≥1} (−1)^{k+1} exp(−2 k² x²), solved by
    /// bisection; the squared value calibrates the d = 1 bridge functional.
    pub(crate) fn kolmogorov_sup_sq_quantile(prob: f64) -> f64 {
        let tail = |x: f64| -> f64 {
            let mut s = 0.0;
            for k in 1..200 {
                let term = (-2.0 * (k as f64).powi(2) * x * x).exp();
                s += if k % 2 == 1 { term } else { -term };
            }
            2.0 * s
        };
        let (mut lo, mut hi) = (0.2f64, 5.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if tail(mid) > 1.0 - prob {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x = 0.5 * (lo + hi);
        x * x
    }

    fn small_bridge(d: usize, alpha: f64) -> CritvalRequest {
        CritvalRequest::bridge(
            d,
            alpha,
            WeightFn::Constant,
            CritvalParams {
                grid: 2000,
                paths: 20_000,
                seed: 9,
            },
        )
    }

    fn small_monitor(d: usize, t: f64) -> CritvalRequest {
        CritvalRequest::monitor(
            d,
            0.05,
            t,
            CritvalParams {
                grid: 1000,
                paths: 20_000,
                seed: 9,
            },
        )
    }

    #[test]
    fn analytic_oracle_value() {
        // The solved 0.95 quantile of sup|B|² is ≈ 1.3581² ≈ 1.8444.
        let c = kolmogorov_sup_sq_quantile(0.95);
        assert!((c.sqrt() - 1.3581).abs() < 1e-3, "{}", c.sqrt());
        assert!((c - 1.8444).abs() < 5e-4, "{c}");
    }

    #[test]
    fn bridge_quantile_matches_analytic_oracle_loosely() {
        let req = small_bridge(1, 0.05);
        let got = bridge_sup_quantile(&req).unwrap();
        let want = kolmogorov_sup_sq_quantile(0.95);
        let rel = (got - want).abs() / want;
        assert!(rel < 0.05, "got {got}, want {want}, rel {rel}");
    }

    #[test]
    fn quantiles_are_monotone_in_alpha_and_dimension() {
        let q05 = bridge_sup_quantile(&small_bridge(1, 0.05)).unwrap();
        let q10 = bridge_sup_quantile(&small_bridge(1, 0.10)).unwrap();
        let q50 = bridge_sup_quantile(&small_bridge(1, 0.50)).unwrap();
        let q999 = bridge_sup_quantile(&small_bridge(1, 0.999)).unwrap();
        assert!(q05 > q10 && q10 > q50 && q50 > q999);
        assert!(q999 < 0.4, "near-1 alpha quantile should collapse: {q999}");

        // Per-coordinate streams make dimension domination pathwise exact.
        let d1 = bridge_sup_quantile(&small_bridge(1, 0.05)).unwrap();
        let d2 = bridge_sup_quantile(&small_bridge(2, 0.05)).unwrap();
        let d3 = bridge_sup_quantile(&small_bridge(3, 0.05)).unwrap();
        assert!(d1 <= d2 && d2 <= d3, "{d1} {d2} {d3}");
    }

    #[test]
    fn monitor_quantile_monotone_in_horizon_and_degenerate_near_one() {
        let t15 = monitor_sup_quantile(&small_monitor(3, 1.5)).unwrap();
        let t12 = monitor_sup_quantile(&small_monitor(3, 1.2)).unwrap();
        let t101 = monitor_sup_quantile(&small_monitor(3, 1.01)).unwrap();
        assert!(t15 >= t12 && t12 >= t101, "{t15} {t12} {t101}");
        assert!(t101 < 0.5 * t15, "horizon near 1 should collapse: {t101}");
        let d2 = monitor_sup_quantile(&small_monitor(2, 1.5)).unwrap();
        assert!(t15 >= d2);
    }

    #[test]
    fn statistics_are_deterministic_and_seed_sensitive() {
        let req = small_bridge(2, 0.05);
        let a = simulate_statistics(&req).unwrap();
        let b = simulate_statistics(&req).unwrap();
        assert_eq!(a, b);
        let mut req2 = req;
        req2.seed = 10;
        let c = simulate_statistics(&req2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn grid_pair_orders_coarse_below_fine() {
        let req = small_bridge(1, 0.05);
        let (coarse, fine) = bridge_quantile_grid_pair(&req).unwrap();
        // The coarse sup runs over a subset of grid points of the same paths.
        assert!(coarse <= fine, "{coarse} > {fine}");
        let gap = (fine - coarse) / fine;
        assert!(gap < 0.05, "discretization gap {gap}");
    }

    #[test]
    fn mc_se_is_positive_and_small_at_scale() {
        let est = quantile_with_se(&small_bridge(1, 0.05)).unwrap();
        assert!(est.mc_se > 0.0);
        assert!(est.mc_se < 0.1 * est.value);
    }

    #[test]
    fn cache_round_trip_and_corruption_recovery() {
        let dir = tempfile::tempdir().unwrap();
        let cache = CritvalCache::new(dir.path());
        let req = CritvalRequest::bridge(
            1,
            0.05,
            WeightFn::Constant,
            CritvalParams {
                grid: 500,
                paths: 2000,
                seed: 3,
            },
        );
        assert!(cache.lookup(&req).is_none());
        let (v1, hit1) = cache.get_or_compute(&req).unwrap();
        assert!(!hit1);
        let (v2, hit2) = cache.get_or_compute(&req).unwrap();
        assert!(hit2);
        assert_eq!(v1.to_bits(), v2.to_bits());

        // Different seed is a different key.
        let mut other = req;
        other.seed = 4;
        assert!(cache.lookup(&other).is_none());

        // Corrupt the file: entries are dropped, recomputed, overwritten.
        std::fs::write(cache.file_path(), "garbage\nnot a record\n").unwrap();
        assert!(cache.lookup(&req).is_none());
        let (v3, hit3) = cache.get_or_compute(&req).unwrap();
        assert!(!hit3);
        assert_eq!(v1.to_bits(), v3.to_bits());
    }

    #[test]
    fn rejects_invalid_requests() {
        let mut req = small_bridge(1, 0.05);
        req.alpha = 0.0;
        assert!(bridge_sup_quantile(&req).is_err());
        let bad_t = CritvalRequest::monitor(1, 0.05, 1.0, CritvalParams::default());
        assert!(bad_t.validate().is_err());
        let bad_kind = small_bridge(1, 0.05);
        assert!(monitor_sup_quantile(&bad_kind).is_err());
    }
}
