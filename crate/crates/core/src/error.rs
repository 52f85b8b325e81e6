use thiserror::Error;

/// Errors raised by the on-disk formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: Vec<u8>, found: Vec<u8> },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("checksum mismatch in section {section}")]
    ChecksumMismatch { section: String },
    #[error("unexpected section: expected {expected}, found {found}")]
    UnexpectedSection { expected: String, found: String },
    #[error("dimension mismatch with manifest: expected {expected}, file has {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("malformed payload: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unregistered class id {0}")]
    UnknownClass(u32),
    #[error("duplicate class name {0:?}")]
    DuplicateClass(String),
    #[error("duplicate object id {0}")]
    DuplicateObject(u64),
    #[error("unknown object id {0}")]
    UnknownObject(u64),
    #[error("insufficient samples for {what}: need {needed}, got {got}")]
    InsufficientSamples {
        what: String,
        needed: usize,
        got: usize,
    },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("frozen parameters changed during training")]
    FreezeViolated,
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Coarse failure class, used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io(_) => ErrorKind::Io,
            Error::Format(_) | Error::Json(_) => ErrorKind::Format,
            Error::NonFinite(_) | Error::FreezeViolated => ErrorKind::Numerical,
            _ => ErrorKind::Validation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Io,
    Format,
    Validation,
    Numerical,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
