use crate::stage::SleepStage;
use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by model training, evaluation, decoding and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter was outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation that requires data received none.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Two sequences that must be epoch-aligned have different lengths.
    #[error("length mismatch: {left} epochs vs {right}")]
    LengthMismatch { left: usize, right: usize },

    /// A text format could not be parsed; `origin` is a path or input label.
    #[error("{origin}:{line}: {message}")]
    Parse {
        origin: String,
        line: usize,
        message: String,
    },

    /// A model assigned probability zero (or NaN) to an observed event.
    #[error("record {record}, epoch {epoch}: model assigned non-positive probability to stage {stage}")]
    ZeroProbability {
        record: String,
        epoch: usize,
        stage: SleepStage,
    },

    /// Numerical failure: training divergence, non-convergent iteration, etc.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(origin: &str, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            origin: origin.to_string(),
            line,
            message: message.into(),
        }
    }
}
