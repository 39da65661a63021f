//! Structural change-point detection for integer-valued time series.
//!
//! The library estimates linear INGARCH(p, q) conditional-mean models by
//! Poisson quasi-maximum likelihood and builds two tests on top of the
//! estimator:
//!
//! - a retrospective scan over all admissible split points, comparing the
//!   pre- and post-split estimates through a split-sample sandwich metric
//!   ([`retrospective`]), and
//! - a sequential monitor that calibrates on a historical stretch and raises
//!   an alarm once the normalized discrepancy between a post-history window
//!   estimate and the historical estimate crosses a boundary ([`sequential`]).
//!
//! Critical values for both procedures are Monte-Carlo quantiles of the
//! corresponding Brownian-bridge and Brownian-motion limit functionals
//! ([`critvals`]), with a small on-disk cache. [`replicate`] drives batched
//! simulation experiments (empirical level, power and detection delay).

pub mod critvals;
pub mod error;
pub mod linalg;
pub mod model;
mod optim;
pub mod pqmle;
pub mod replicate;
pub mod retrospective;
pub mod sequential;
pub mod series;

pub use error::{Error, Result};
pub use model::{
    mean_gradient_path, simulate, simulate_piecewise, simulate_with_means, stationary_mean,
    truncated_mean_path, IngarchParams, Innovation, ModelSpec, ParamSpace, PresampleMean,
};
pub use pqmle::{fit, neg_hessian, quasi_loglik, sandwich_se, score, FitOptions, FitResult, Window};
pub use series::CountSeries;

/// Derives an independent stream seed from a master seed and an index
/// (splitmix64 finalizer). Used everywhere replications or paths need their
/// own reproducible RNG regardless of scheduling.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E3779B97F4A7C15)
        .wrapping_add(index.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}
