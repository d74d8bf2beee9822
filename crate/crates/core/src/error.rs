use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("configuration error at `{field}`: {message}")]
    Config { field: String, message: String },

    /// A call received arguments that violate its preconditions.
    #[error("argument error: {0}")]
    Argument(String),

    /// A file did not match the expected on-disk layout.
    #[error("format error in {context} at byte {offset}: {message}")]
    Format {
        context: String,
        offset: u64,
        message: String,
    },

    /// A pluggable component (denoiser, feature extractor) broke its contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A prediction file required for evaluation is absent.
    #[error("missing prediction for case `{case_id}` ({path})")]
    MissingPrediction { case_id: String, path: PathBuf },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn format(context: impl Into<String>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            offset,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}

/// Shorthand for an [`Error::Argument`] from a format string.
macro_rules! arg_err {
    ($($t:tt)*) => {
        $crate::error::Error::Argument(format!($($t)*))
    };
}
pub(crate) use arg_err;
