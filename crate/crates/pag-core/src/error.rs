use std::fmt;

/// Errors surfaced by tensor, tape, gating, and file-format operations.
#[derive(Debug)]
pub enum Error {
    /// Shape or dimension disagreement between operands.
    DimMismatch(String),
    /// An argument outside its documented domain.
    InvalidArg(String),
    /// An operation produced or was handed a non-finite value.
    NonFinite(String),
    /// A gating mask contained entries other than 0 and 1.
    NonBinaryMask(String),
    /// backward() was asked to differentiate a node that is not a scalar.
    NonScalarLoss { len: usize },
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// Malformed PTSR payload, manifest, or image buffer.
    Format(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimMismatch(msg) => write!(f, "dimension mismatch: {msg}"),
            Error::InvalidArg(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::NonBinaryMask(msg) => write!(f, "non-binary mask: {msg}"),
            Error::NonScalarLoss { len } => {
                write!(f, "loss node must be scalar, got {len} elements")
            }
            Error::Io(err) => write!(f, "io error: {err}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
