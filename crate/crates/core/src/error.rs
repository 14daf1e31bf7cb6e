use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the alignment and learning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("malformed WAV: {0}")]
    Wav(String),

    #[error("malformed MIDI at byte offset {offset}: {message}")]
    Midi { offset: usize, message: String },

    #[error("malformed {format} file: {message}")]
    Format { format: &'static str, message: String },

    #[error("CSV error at line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error("sample rate mismatch: buffer is {actual} Hz, required {required} Hz")]
    RateMismatch { actual: u32, required: u32 },

    #[error("sample {index} out of range [-1, 1]: {value}")]
    SampleOutOfRange { index: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("cost matrix of {rows}x{cols} needs {required_bytes} bytes, budget is {budget_bytes}")]
    MemoryBudget {
        rows: usize,
        cols: usize,
        required_bytes: u64,
        budget_bytes: u64,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Divergence {
        epoch: usize,
        batch: usize,
        loss: f64,
        trace: Vec<f64>,
    },

    #[error("no segments could be cut: {0}")]
    EmptySegments(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by malformed input files.
    pub fn is_input_format(&self) -> bool {
        matches!(
            self,
            Error::Wav(_) | Error::Midi { .. } | Error::Format { .. } | Error::Csv { .. }
        )
    }

    /// True for numerical failures (divergence, non-finite values).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
