use thiserror::Error;

#[derive(Debug, Error)]
pub enum CmlError {
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller broke an operation's precondition (non-scalar loss, misaligned batch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CmlError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CmlError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CmlError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = CmlError> = std::result::Result<T, E>;
