use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's shape or argument contract.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("truncated SVD did not converge after {iterations} iterations (residual {residual:e})")]
    SvdNoConvergence { iterations: usize, residual: f64 },

    /// Every node of a DP rank has failed or is already doubled.
    #[error("DP rank {rank} is unrecoverable: {detail}")]
    UnrecoverableRank { rank: usize, detail: String },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("gradient for {param} is missing on rank {rank}, which is in its active set")]
    MissingGradient { param: String, rank: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::NonFinite { .. } | Error::SvdNoConvergence { .. } => 3,
            Error::UnrecoverableRank { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
