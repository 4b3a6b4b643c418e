//! Error type shared by every stage of the toolkit.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Parse { .. } | Error::Shape(_) | Error::Data(_) | Error::Io(_) => 3,
            Error::Training(_) => 4,
            Error::Evaluation(_) => 5,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Copy of this error; i/o errors keep their kind and message only.
    pub fn duplicate(&self) -> Self {
        match self {
            Error::Parse { path, line, msg } => Error::Parse {
                path: path.clone(),
                line: *line,
                msg: msg.clone(),
            },
            Error::Shape(m) => Error::Shape(m.clone()),
            Error::Data(m) => Error::Data(m.clone()),
            Error::Config(m) => Error::Config(m.clone()),
            Error::Training(m) => Error::Training(m.clone()),
            Error::Evaluation(m) => Error::Evaluation(m.clone()),
            Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), e.to_string())),
        }
    }

    /// Prefix the message with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            Error::Parse { path, line, msg } => Error::Parse {
                path,
                line,
                msg: format!("[{stage}] {msg}"),
            },
            Error::Shape(m) => Error::Shape(format!("[{stage}] {m}")),
            Error::Data(m) => Error::Data(format!("[{stage}] {m}")),
            Error::Config(m) => Error::Config(format!("[{stage}] {m}")),
            Error::Training(m) => Error::Training(format!("[{stage}] {m}")),
            Error::Evaluation(m) => Error::Evaluation(format!("[{stage}] {m}")),
            Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), format!("[{stage}] {e}"))),
        }
    }
}
