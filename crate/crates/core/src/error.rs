use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("empty parameter: shape {0} has no elements")]
    EmptyParameter(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("label {value} at pixel (n={n}, y={y}, x={x}) is out of range for {classes} classes")]
    LabelOutOfRange {
        n: usize,
        y: usize,
        x: usize,
        value: u32,
        classes: usize,
    },

    #[error("malformed netpbm header in {path}: {detail}")]
    MalformedHeader { path: PathBuf, detail: String },

    #[error("truncated netpbm payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("numeric check failed: {0}")]
    NumericCheck(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end: 1 usage/config,
    /// 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) | Error::NumericCheck(_) => 3,
            Error::Data(_)
            | Error::LabelOutOfRange { .. }
            | Error::MalformedHeader { .. }
            | Error::TruncatedPayload { .. }
            | Error::Checkpoint(_)
            | Error::Io { .. } => 2,
            Error::Shape { .. }
            | Error::EmptyParameter(_)
            | Error::InvalidArgument(_)
            | Error::Config(_) => 1,
        }
    }
}
