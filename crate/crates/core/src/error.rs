use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm below 1e-12")]
    ZeroNormVector,
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("index {index} out of range for {len} members")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("support set is empty")]
    EmptySupportSet,
    #[error("no class has a prototype")]
    NoPrototypes,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("neighbor list is empty")]
    EmptyNeighborList,
    #[error("batch statistics need at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("grid is empty")]
    EmptyGrid,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bad magic bytes at offset 0")]
    BadMagic,
    #[error("unsupported format version {0} at offset 4")]
    UnsupportedVersion(u32),
    #[error("file truncated: needed {needed} bytes at offset {offset}")]
    TruncatedFile { offset: u64, needed: u64 },
    #[error("{extra} unexpected trailing bytes at offset {offset}")]
    TrailingBytes { offset: u64, extra: u64 },
    #[error("non-finite value at byte offset {offset}")]
    NonFiniteValue { offset: u64 },
    #[error("invalid label {label} at byte offset {offset}")]
    InvalidLabel { offset: u64, label: i32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
