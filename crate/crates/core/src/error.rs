use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input shapes do not fit the primitive.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A forward pass produced NaN or Inf.
    #[error("numeric fault: non-finite output at node {node}")]
    NumericFault { node: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation contract (empty batch, unlabeled sample, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A probability or label outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("gradient oracle invalid: {0}")]
    OracleInvalid(String),

    #[error("failed to load {}: {detail}", path.display())]
    Load { path: PathBuf, detail: String },

    #[error("io error on {}: {source}", path.display())]
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

    pub(crate) fn load(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericFault { .. } => 3,
            Error::Io { .. } => 1,
            _ => 2,
        }
    }
}
