//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Paired arguments disagree (e.g. a histogram whose sum does not match
    /// its declared draw count).
    #[error("argument mismatch: {0}")]
    Mismatch(String),

    /// An exact enumeration was refused because the support is too large.
    #[error("support too large: {support} states exceeds limit {limit}")]
    SupportTooLarge { support: u128, limit: u128 },

    /// A draw was requested from an exhausted pool.
    #[error("empty pool: no votes remain to draw")]
    EmptyPool,

    /// An operation that needs observations received none.
    #[error("empty data: {0}")]
    EmptyData(String),

    /// Correlation is undefined because one input has zero variance.
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    /// A dataset file failed to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A validated input violated an invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
