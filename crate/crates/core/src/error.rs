use thiserror::Error;

/// Errors produced anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum DtaadError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric degeneracy: {0}")]
    NumericDegenerate(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Diverged { epoch: usize, batch: usize },

    #[error("no peaks above the initial threshold")]
    NoPeaks,

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("unsupported checkpoint format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DtaadError>;

pub(crate) fn invalid(msg: impl Into<String>) -> DtaadError {
    DtaadError::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> DtaadError {
    DtaadError::Shape(msg.into())
}
