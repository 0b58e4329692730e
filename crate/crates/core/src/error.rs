use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PnlError>;

#[derive(Debug, Error)]
pub enum PnlError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("input too large: {0}")]
    Size(String),

    #[error("{path}: parse error at byte {offset}: {msg}")]
    Parse {
        path: String,
        offset: u64,
        msg: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at epoch {epoch}: non-finite loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
}

impl PnlError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        PnlError::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        PnlError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PnlError::Io {
            path: path.into(),
            source,
        }
    }
}
