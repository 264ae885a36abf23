use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the simulator, dialogue and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("no feasible query: {0}")]
    NoFeasibleQuery(String),

    #[error("incompatible observation: {0}")]
    IncompatibleObservation(String),

    #[error("schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("language model error: {0}")]
    Lm(#[from] LmError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures of a language-model client.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum LmError {
    #[error("LM configuration error: {0}")]
    Config(String),

    #[error("LM request timed out")]
    Timeout,

    #[error("LM endpoint returned HTTP {status}")]
    Status { status: u16 },

    #[error("LM transport failure: {0}")]
    Transport(String),

    #[error("malformed LM response: {0}")]
    Malformed(String),

    #[error("scripted failure: {0}")]
    Scripted(String),
}

impl LmError {
    /// Transient failures worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            LmError::Timeout | LmError::Transport(_) | LmError::Scripted(_) => true,
            LmError::Status { status } => *status == 429 || (500..600).contains(status),
            LmError::Config(_) | LmError::Malformed(_) => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
