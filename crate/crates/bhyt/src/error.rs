//! Error taxonomy shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum BhytError {
    /// Tensor shapes do not satisfy an operation's preconditions.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A scalar or config argument is outside its admissible range.
    #[error("parameter error in {op}: {detail}")]
    Parameter { op: &'static str, detail: String },

    /// Input is degenerate (e.g. zero variance with eps = 0).
    #[error("degenerate input in {op}: {detail}")]
    DegenerateInput { op: &'static str, detail: String },

    /// A NaN or Inf appeared; `site` names the first offending location.
    #[error("numeric failure at {site}: non-finite value")]
    NonFinite { site: String },

    /// An operation was invoked against stale or missing cached state.
    #[error("state error in {op}: {detail}")]
    State { op: &'static str, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BhytError>;

impl BhytError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        BhytError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn param(op: &'static str, detail: impl Into<String>) -> Self {
        BhytError::Parameter {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        BhytError::DegenerateInput {
            op,
            detail: detail.into(),
        }
    }
}
