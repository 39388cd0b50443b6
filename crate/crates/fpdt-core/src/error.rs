//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by the simulator, data pipeline, model, and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Effective link rate is non-positive; the download cannot complete.
    #[error("infeasible link: effective rate {rate_bps} bit/s is not positive")]
    InfeasibleLink { rate_bps: f64 },

    /// Effective CPU frequency is non-positive; rendering cannot complete.
    #[error("infeasible compute: effective frequency {freq_hz} Hz is not positive")]
    InfeasibleCompute { freq_hz: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("checksum mismatch: file is corrupted ({0})")]
    ChecksumMismatch(String),

    #[error("unsupported container version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt container: {0}")]
    Corrupt(String),

    /// Checkpoint was produced under a different model configuration.
    #[error("checkpoint/config mismatch: {0}")]
    CheckpointMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for the CLI: 2 for usage/config problems, 3 for
    /// data/checkpoint integrity problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::Parse { .. } => 2,
            Error::ChecksumMismatch(_)
            | Error::VersionMismatch { .. }
            | Error::Corrupt(_)
            | Error::CheckpointMismatch(_) => 3,
            _ => 1,
        }
    }
}
