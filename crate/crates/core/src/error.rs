use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SigmaError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("empty corpus: {0}")]
    EmptyCorpus(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss component `{part}` ({value})")]
    NonFinite { part: &'static str, value: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("incompatible artifacts: {0}")]
    Incompatible(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SigmaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SigmaError::Io {
            path: path.into(),
            source,
        }
    }

    /// Broad failure class, used by the CLI to choose an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            SigmaError::Config(_) => ErrorKind::Config,
            SigmaError::Parse { .. }
            | SigmaError::EmptyCorpus(_)
            | SigmaError::Io { .. }
            | SigmaError::Json(_)
            | SigmaError::Incompatible(_)
            | SigmaError::Missing(_)
            | SigmaError::Checkpoint(_) => ErrorKind::Data,
            SigmaError::Domain(_) | SigmaError::Shape(_) | SigmaError::NonFinite { .. } | SigmaError::Eval(_) => {
                ErrorKind::Runtime
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

pub type Result<T, E = SigmaError> = std::result::Result<T, E>;
