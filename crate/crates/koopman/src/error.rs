//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong in the pipeline.
///
/// Variants carry enough context to be actionable from a CLI one-liner;
/// [`Error::code`] gives a stable machine-readable tag per variant.
#[derive(Debug, Error)]
pub enum Error {
    /// A vector or matrix had the wrong size for the operation.
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    Dimension {
        what: String,
        expected: usize,
        actual: usize,
    },

    /// A scalar argument or configuration value is out of range.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// The regression is under-determined for the requested dictionary.
    #[error(
        "lifted Gram matrix is rank deficient or numerically singular; \
         refit with a ridge parameter > 0"
    )]
    RankDeficient,

    /// An extraction or controller was handed a model of the wrong family.
    #[error("expected a {expected} basis, got {actual}")]
    WrongFamily {
        expected: &'static str,
        actual: &'static str,
    },

    /// The principal matrix logarithm does not exist (or is not safely
    /// computable) for the given matrix.
    #[error("matrix logarithm is undefined here: {0}")]
    LogDomain(String),

    /// An iterative numeric routine failed to converge or lost accuracy.
    #[error("numerical failure in {0}")]
    Numerical(String),

    /// A simulated state stopped being finite.
    #[error("state diverged (non-finite values) at step {step}")]
    Diverged { step: usize },

    /// A dataset or episode list was empty where data is required.
    #[error("empty dataset: {0}")]
    EmptyData(String),

    /// A requested workspace point lies outside the arm's reachable disc.
    #[error("point ({x:.4}, {y:.4}) lies outside the reachable radius {reach:.4}")]
    OutOfReach { x: f64, y: f64, reach: f64 },

    /// Plain I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A text artifact could not be parsed.
    #[error("parse error in {file} at line {line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
}

impl Error {
    /// Stable snake_case tag for machine consumption (CLI error lines).
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension_mismatch",
            Error::Invalid(_) => "invalid_argument",
            Error::RankDeficient => "rank_deficient",
            Error::WrongFamily { .. } => "wrong_family",
            Error::LogDomain(_) => "log_domain",
            Error::Numerical(_) => "numerical",
            Error::Diverged { .. } => "diverged",
            Error::EmptyData(_) => "empty_data",
            Error::OutOfReach { .. } => "out_of_reach",
            Error::Io(_) => "io",
            Error::Parse { .. } => "parse",
        }
    }
}
