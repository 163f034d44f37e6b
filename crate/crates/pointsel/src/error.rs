use thiserror::Error;

/// Errors produced across the crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("empty point set")]
    EmptyPointSet,

    #[error("sample count {requested} exceeds point count {available}")]
    SampleCountTooLarge { requested: usize, available: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("last extent {extent} not divisible into {parts} parts")]
    NonDivisibleSlice { extent: usize, parts: usize },

    #[error("batch norm requires at least 2 rows in train mode, got {0}")]
    BatchTooSmall(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown class name: {0}")]
    UnknownClass(String),

    #[error("checkpoint version mismatch: {0}")]
    CheckpointVersion(String),

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("unknown tensor name in checkpoint: {0}")]
    CheckpointUnknownTensor(String),

    #[error("stage index {0} out of range")]
    StageOutOfRange(usize),

    #[error("empty evaluation set")]
    EmptyEvalSet,

    #[error("training diverged: non-finite loss at epoch {epoch}, last finite epoch {last_finite:?}")]
    Diverged { epoch: usize, last_finite: Option<usize> },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
