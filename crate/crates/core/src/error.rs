use std::fmt;

/// Errors raised anywhere in the lab. Each variant maps onto one process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric domain error in {op} at row {row}: {detail}")]
    Domain {
        op: &'static str,
        row: usize,
        detail: String,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }

    pub fn format(offset: u64, detail: impl fmt::Display) -> Self {
        Error::Format {
            offset,
            detail: detail.to_string(),
        }
    }

    /// 0 success, 1 configuration, 2 numeric failure, 3 verification failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format { .. } | Error::Io(_) => 1,
            Error::Domain { .. } | Error::Numeric(_) => 2,
            Error::Verification(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
