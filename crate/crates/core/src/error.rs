use std::path::Path;

/// Error type shared by every stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed data or arguments handed to an operation.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value (skeleton, model, training, CLI) is unusable.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A NaN or infinity showed up during a numerical computation.
    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("{path}: {reason}")]
    Format { path: String, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.display().to_string(),
            reason: reason.into(),
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
