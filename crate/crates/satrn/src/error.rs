use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor ops, model construction, data generation and I/O.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    Shape { op: &'static str, detail: String },
    /// Invalid architecture or run configuration.
    Config(String),
    /// Malformed input data (labels, token ids, dataset files).
    Data(String),
    /// API misuse (e.g. backward on a non-scalar).
    Usage(String),
    /// Checkpoint file is truncated, has a bad magic, or disagrees with its config.
    CorruptCheckpoint(String),
    /// A sample cannot be rendered under the requested generation spec.
    Generation(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::CorruptCheckpoint(msg) => write!(f, "corrupt checkpoint: {msg}"),
            Error::Generation(msg) => write!(f, "generation error: {msg}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    /// Whether the error is attributable to user input rather than an
    /// internal/environment failure. The CLI maps this to exit code 1 vs 2.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}
