//! Crate-wide error type and result alias.

use std::path::PathBuf;
use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum LfError {
    /// An index (view, row, column) outside its valid range.
    #[error("index out of range: {0}")]
    Range(String),
    /// A caller-supplied value violating a precondition.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// Incompatible tensor or image shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A patch window left the EPI under the reject border policy.
    #[error("patch window out of bounds: {0}")]
    Border(String),
    /// Malformed file contents; `offset` is the byte position of the problem.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },
    /// Bad configuration file or unknown key.
    #[error("config error: {0}")]
    Config(String),
    /// Dataset directory missing views or with inconsistent contents.
    #[error("dataset error: {0}")]
    Dataset(String),
    /// Checkpoint file corrupt or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// Training aborted (diverged loss, degenerate batch).
    #[error("training aborted: {0}")]
    Training(String),
    /// Underlying I/O failure, annotated with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LfError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LfError::Io { path: path.into(), source }
    }

    /// Process exit code: 1 for validation problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            LfError::Range(_)
            | LfError::Argument(_)
            | LfError::Shape(_)
            | LfError::Border(_)
            | LfError::Config(_) => 1,
            LfError::Parse { .. }
            | LfError::Dataset(_)
            | LfError::Checkpoint(_)
            | LfError::Training(_)
            | LfError::Io { .. } => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, LfError>;
