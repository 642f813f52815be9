use std::fmt;

/// Error type shared by every subsystem.
#[derive(Debug)]
pub enum Error {
    /// Tensor shape mismatch; the message names both shapes.
    Dimension(String),
    /// Invalid configuration or argument value.
    Parameter(String),
    /// Empty corpus, split, or sequence where content is required.
    Empty(String),
    /// Malformed file content (TSV, embedding file, container).
    Format(String),
    /// Well-formed file with an out-of-range or unknown value.
    Value(String),
    /// Index out of range.
    Index(String),
    /// API contract violation (e.g. backward from a non-scalar).
    Contract(String),
    /// Corrupt or truncated binary container.
    Corrupt(String),
    /// Non-finite loss or a failed gradient check.
    Numerical(String),
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Parameter(m) => write!(f, "parameter error: {m}"),
            Error::Empty(m) => write!(f, "empty input: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Value(m) => write!(f, "value error: {m}"),
            Error::Index(m) => write!(f, "index error: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Corrupt(m) => write!(f, "corrupt file: {m}"),
            Error::Numerical(m) => write!(f, "numerical failure: {m}"),
            Error::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 data/format, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_) => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
