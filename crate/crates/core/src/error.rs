use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the solver and its front end.
#[derive(Debug, Error)]
pub enum Error {
    /// A problem or distribution field violates its invariant.
    #[error("{field}: {reason}")]
    InvalidSpec { field: String, reason: String },

    /// Input contained NaN or infinite values.
    #[error("non-finite input: {0}")]
    NonFinite(String),

    /// Covariance of a particle cloud is singular.
    #[error("degenerate ensemble covariance")]
    DegenerateCovariance,

    /// Least-squares system for a potential fit has no unique solution.
    #[error("rank-deficient potential fit ({0}); use a ridge weight gamma > 0")]
    RankDeficient(String),

    /// A particle left the finite range during time stepping.
    #[error("numerical blow-up at {context}")]
    BlowUp { context: String },

    /// Oracle computation failed (grid, bracket or convergence).
    #[error("oracle: {0}")]
    Oracle(String),

    /// Configuration document could not be parsed.
    #[error("config error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn spec(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidSpec {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
