use std::path::PathBuf;

/// Crate-wide error type.
///
/// Variants are grouped so the CLI can map them onto its exit-code contract:
/// validation problems exit 2, numerical failures exit 3, I/O failures exit 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shape mismatch, naming the offending axis.
    #[error("{op}: axis {axis} mismatch: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        axis: String,
        expected: usize,
        got: usize,
    },

    /// Structural problem with an argument that is not a per-axis mismatch.
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    /// Configuration file or value rejected.
    #[error("config {path}: {msg}")]
    Config { path: String, msg: String },

    /// On-disk format violation (bad magic, truncation, unsupported field).
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// Checkpoint parameter manifest does not match the model it is loaded into.
    #[error("checkpoint parameter {name}: {msg}")]
    Checkpoint { name: String, msg: String },

    /// Non-finite value encountered where a finite one is required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Training diverged (non-finite loss or gradient).
    #[error("training diverged at {context}")]
    Divergence { context: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for this error under the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ShapeMismatch { .. }
            | Error::Invalid { .. }
            | Error::Config { .. }
            | Error::Checkpoint { .. } => 2,
            Error::NonFinite { .. } | Error::Divergence { .. } => 3,
            Error::Format { .. } | Error::Io { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
