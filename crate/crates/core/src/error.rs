use std::path::PathBuf;

/// Errors raised by the library and the command-line front end.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    Dims(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("dense budget exceeded: {what} needs {size} entries (limit {limit})")]
    DenseBudget {
        what: &'static str,
        size: u128,
        limit: usize,
    },

    #[error("non-finite training loss at step {step}, tuple {tuple}")]
    NonFiniteLoss { step: usize, tuple: usize },

    #[error("integration produced a non-finite state at step {step}")]
    Integration { step: usize },

    #[error("rejection sampler exceeded {cap} draws for factor {factor}")]
    RejectionCap { factor: usize, cap: usize },

    #[error("parse error in {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
