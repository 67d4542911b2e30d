use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LdpError>;

#[derive(Debug, Error)]
pub enum LdpError {
    /// An input violates a mathematical precondition (non-positive depth,
    /// mismatched shapes, probabilities outside (0,1), ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("failed to load weights from {uri}: {message}")]
    Load { uri: PathBuf, message: String },

    #[error("unknown prompt for the oracle stub encoder: {0:?}")]
    UnknownPrompt(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LdpError {
    pub fn domain(msg: impl Into<String>) -> Self {
        LdpError::Domain(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        LdpError::Shape(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        LdpError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LdpError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            LdpError::Config { .. } | LdpError::UnknownPrompt(_) | LdpError::Unsupported(_) => 2,
            LdpError::Numeric(_) => 4,
            _ => 3,
        }
    }
}
