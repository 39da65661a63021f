//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Parameter vector violates the admissible region or the model shape.
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    /// Model specification itself is malformed (orders, dispersion).
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    /// A time window is empty, reversed or falls outside the series.
    #[error("invalid window: {0}")]
    InvalidWindow(String),

    /// Not enough observations for the requested operation.
    #[error("series too short: need at least {need} observations, got {got}")]
    SeriesTooShort { need: usize, got: usize },

    /// Truncation point lies after the range it is supposed to seed.
    #[error("truncation index {trunc_at} is after the requested range start {lo}")]
    TruncationAfterRange { trunc_at: i64, lo: i64 },

    /// A matrix that must be invertible (or floor-bounded) is not.
    #[error("singular matrix in {0}")]
    SingularMatrix(String),

    /// Optimizer could not produce a usable estimate.
    #[error("fit failed: {0}")]
    FitFailed(String),

    /// Malformed request to the critical-value engine.
    #[error("invalid critical-value request: {0}")]
    InvalidRequest(String),

    /// Monitoring was driven past its closed-end horizon or after an alarm.
    #[error("monitoring error: {0}")]
    Monitor(String),

    /// CSV ingestion failure, with 1-based line number.
    #[error("csv parse error at line {line}: {msg}")]
    Csv { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
