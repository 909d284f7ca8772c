use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX payload: header promises {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("bad image dimensions {rows}x{cols}, only 28x28 is supported")]
    BadDims { rows: u32, cols: u32 },
    #[error("label {label} at index {index} is out of range")]
    LabelOutOfRange { index: usize, label: u8 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("concept table parse error: {0}")]
    ParseError(#[from] serde_json::Error),
    #[error("concept table schema violation: {0}")]
    SchemaViolation(String),
    #[error("no training sample with digit label {0}")]
    NoSampleForDigit(u8),
    #[error("label collision: {0}")]
    LabelCollision(String),

    #[error("invalid architecture: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("need at least {k} distinct vectors, got {distinct}")]
    TooFewVectors { k: usize, distinct: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("png encoding failed: {0}")]
    Png(#[from] png::EncodingError),
}

pub type Result<T> = std::result::Result<T, Error>;
