use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents do not fit the operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("clip too short: {samples} samples, need at least {min}")]
    TooShort { samples: usize, min: usize },

    #[error("numerical abort: non-finite loss at epoch {epoch}, batch {batch}")]
    NumericalAbort { epoch: usize, batch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("clip {id}: {source}")]
    Clip {
        id: String,
        #[source]
        source: Box<Error>,
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

    pub(crate) fn in_clip(self, id: &str) -> Self {
        Error::Clip {
            id: id.to_string(),
            source: Box::new(self),
        }
    }

    /// Innermost error, looking through clip wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Clip { source, .. } => source.root(),
            e => e,
        }
    }
}
