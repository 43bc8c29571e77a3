//! Error type shared across the crate.
//!
//! Every fallible operation returns [`Result`]. Errors map onto process
//! exit codes: 0 success, 1 check failure, 2 config error, 3 runtime error.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not compose for the requested operation.
    #[error("dimension mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid configuration (bad key, violating invariants such as k > n).
    #[error("config error: {0}")]
    Config(String),

    /// An API contract was violated (stale tape, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input that makes the requested statistic undefined (empty ledger,
    /// all-masked batch, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A numerical check failed (gradient check, acceptance gate).
    #[error("check failed: {0}")]
    CheckFailed(String),

    /// Loss or gradient became non-finite during training.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Wall-clock measurement could not be taken reliably.
    #[error("measurement error: {0}")]
    Measurement(String),

    /// Checkpoint payload does not match its manifest.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::CheckFailed(_) => 1,
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}
