use std::fmt;

#[derive(Debug)]
pub enum HarnessError {
    Core(pag_core::Error),
    Io(std::io::Error),
    Config(String),
    Data(String),
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Core(e) => write!(f, "{e}"),
            HarnessError::Io(e) => write!(f, "io error: {e}"),
            HarnessError::Config(msg) => write!(f, "config error: {msg}"),
            HarnessError::Data(msg) => write!(f, "data error: {msg}"),
        }
    }
}

impl std::error::Error for HarnessError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            HarnessError::Core(e) => Some(e),
            HarnessError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<pag_core::Error> for HarnessError {
    fn from(e: pag_core::Error) -> Self {
        HarnessError::Core(e)
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
