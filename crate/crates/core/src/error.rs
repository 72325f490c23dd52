use std::path::PathBuf;

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("step size at position {index} must be positive, got {value}")]
    NonPositiveStep { index: usize, value: f64 },

    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("timestamps must be strictly increasing (position {index})")]
    NonIncreasingTimestamps { index: usize },

    #[error("sequence of length {len} is too short, need at least {min} events")]
    SequenceTooShort { len: usize, min: usize },

    #[error("event type {k} out of range for K = {num_types}")]
    TypeOutOfRange { k: usize, num_types: usize },

    #[error("model expects K = {model} event types but the data has K = {data}")]
    TypeCountMismatch { model: usize, data: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: field `{field}`: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        field: &'static str,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("excitation matrix has spectral radius {radius:.4} >= 1, the process explodes")]
    Explosive { radius: f64 },

    #[error("no sequence with length in [{min}, {max}] after {attempts} attempts")]
    RetriesExhausted {
        min: usize,
        max: usize,
        attempts: usize,
    },

    #[error("non-finite loss at batch {batch} of epoch {epoch}")]
    NumericAbort { epoch: usize, batch: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
