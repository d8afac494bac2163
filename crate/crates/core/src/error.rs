use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by tensor ops, layers, training, and I/O.
#[derive(Debug)]
pub enum Error {
    /// A precondition on an operation's input was violated.
    InvalidInput(String),
    /// Two operands have incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A non-finite value appeared where the run cannot continue.
    NonFinite { context: String },
    /// A config file failed to parse; carries line and field diagnostics.
    Config {
        path: String,
        line: usize,
        message: String,
    },
    /// Wrapper around filesystem failures.
    Io { path: String, message: String },
    /// Wrapper around checkpoint/report (de)serialization failures.
    Json { path: String, message: String },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Io {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn config(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub fn json(path: impl Into<String>, err: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            message: err.to_string(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::Config {
                path,
                line,
                message,
            } => write!(f, "{path}:{line}: {message}"),
            Error::Io { path, message } => write!(f, "{path}: {message}"),
            Error::Json { path, message } => write!(f, "{path}: {message}"),
        }
    }
}

impl std::error::Error for Error {}
