use std::path::PathBuf;

use scb_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    /// Bad configuration or input that the user can fix.
    #[error("{0}")]
    Validation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: at {json_path}: {message}")]
    Json { path: PathBuf, json_path: String, message: String },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("non-finite loss at step {step} (last finite: {last})")]
    NonFiniteLoss { step: usize, last: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Deserialises `text`, reporting failures with the JSON path of the offending field.
pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(text: &str, path: &std::path::Path) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        json_path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures caused by user input rather than by the run itself.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Json { .. } | Error::Image { .. } | Error::Checkpoint { .. }
        )
    }
}
