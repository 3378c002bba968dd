use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DpError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    /// A sum query was recorded with zero noise, so the round has unbounded
    /// privacy loss.
    #[error("infinite sensitivity: group `{0}` has zero noise")]
    InfiniteSensitivity(String),

    #[error("ledger usage error: {0}")]
    Usage(String),

    #[error("refused to produce a guarantee: {0}")]
    Refusal(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error(
        "calibration infeasible: target epsilon {target} not bracketed \
         (epsilon at lower bound {lower_epsilon}, at upper bound {upper_epsilon})"
    )]
    CalibrationInfeasible {
        target: f64,
        lower_epsilon: f64,
        upper_epsilon: f64,
    },
}

pub type Result<T> = std::result::Result<T, DpError>;

pub(crate) fn invalid(msg: impl Into<String>) -> DpError {
    DpError::InvalidInput(msg.into())
}
