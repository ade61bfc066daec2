use thiserror::Error;

/// Error type shared by every module of the crate.
#[derive(Debug, Error)]
pub enum HicError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("state error: {0}")]
    State(String),

    #[error("numeric error in `{op}`: {detail}")]
    Numeric { op: String, detail: String },

    #[error("config error in field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl HicError {
    pub fn dim(msg: impl Into<String>) -> Self {
        HicError::Dimension(msg.into())
    }

    pub fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        HicError::Numeric {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        HicError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        HicError::Format {
            offset,
            message: message.into(),
        }
    }

    /// Process exit code for the command line: 1 config and contract
    /// violations, 2 file and format problems, 3 numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HicError::Io(_) | HicError::Format { .. } => 2,
            HicError::Numeric { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HicError>;
