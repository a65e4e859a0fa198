use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed header: {msg}")]
    Header { path: PathBuf, line: usize, msg: String },

    #[error("raw size mismatch: expected {expected} bytes, found {actual}")]
    RawSizeMismatch { expected: usize, actual: usize },

    #[error("{path}: line {line}: {msg}")]
    Table { path: PathBuf, line: usize, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint blob digest mismatch: manifest says {expected}, blob hashes to {actual}")]
    DigestMismatch { expected: String, actual: String },

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {actual:?}, model expects {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("training diverged at epoch {epoch}, step {step}: non-finite loss or gradient (loss {loss})")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("need at least one positive and one negative label")]
    SingleClass,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
