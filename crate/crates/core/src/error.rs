use thiserror::Error;

/// Coarse classification used by callers that must map failures to
/// process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Caller passed arguments that violate an operation's contract.
    Contract,
    /// Input data is malformed, inconsistent, or insufficient.
    Data,
    /// Underlying I/O failed.
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    /// An operation precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// A binary container did not start with the expected magic bytes.
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 8], found: [u8; 8] },

    /// A binary container declared a version this build does not read.
    #[error("unsupported {kind} version {found} (supported: {supported})")]
    UnsupportedVersion {
        kind: &'static str,
        found: u32,
        supported: u32,
    },

    /// A binary container ended before its declared payload.
    #[error("truncated {kind}: needed {needed} bytes, had {available}")]
    Truncated {
        kind: &'static str,
        needed: usize,
        available: usize,
    },

    /// A checkpoint's architecture does not match the expected one.
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Contract(_) => ErrorClass::Contract,
            Error::Io(_) => ErrorClass::Io,
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for contract-violation errors.
pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

/// Shorthand for data errors.
pub(crate) fn data_err(msg: impl Into<String>) -> Error {
    Error::Data(msg.into())
}
