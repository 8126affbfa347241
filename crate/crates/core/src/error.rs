use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate feature: norm {norm:e} is below {eps:e}")]
    DegenerateFeature { norm: f64, eps: f64 },

    #[error("corrupt weight file at byte offset {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },

    #[error("weight load rejected: {0}")]
    Load(String),

    #[error("dataset error in {file}: {reason}")]
    Dataset { file: String, reason: String },

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
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

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            context: path.into().display().to_string(),
            source,
        }
    }

    /// True for errors caused by bad user input (config, dataset layout,
    /// arguments) rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_) | Error::Config { .. } | Error::Dataset { .. } | Error::Shape { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
