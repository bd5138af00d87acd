use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("batch norm in train mode needs at least 2 samples per channel, got {0}")]
    DegenerateBatch(usize),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite loss term: {0}")]
    NanGuard(&'static str),
    #[error("bad magic number: expected {expected:#x}, found {found:#x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("count mismatch: {0}")]
    CountMismatch(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("invalid split sizes: {0}")]
    InvalidSizes(String),
    #[error("data unavailable: {0}")]
    DataUnavailable(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
