use thiserror::Error;

/// Errors produced while parsing a weight file.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected \"EEVO\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file while reading `{field}`")]
    Truncated { field: String },
    #[error("config invariant violated in header field `{field}`: {reason}")]
    ConfigInvariant { field: &'static str, reason: String },
    #[error("non-finite value in `{field}`")]
    NonFinite { field: String },
    #[error("{0} trailing bytes after the last matrix")]
    TrailingBytes(usize),
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("capacity exceeded: position {position} does not fit max_seq {max_seq}")]
    Capacity { position: usize, max_seq: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("weight file: {0}")]
    Format(#[from] FormatError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EngineError>;

pub(crate) fn invalid(msg: impl Into<String>) -> EngineError {
    EngineError::InvalidInput(msg.into())
}

pub(crate) fn check_dim(op: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(EngineError::DimensionMismatch { op, expected, got })
    }
}
