use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("archive is missing tensors: {}", .0.join(", "))]
    MissingTensors(Vec<String>),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("unsupported dtype {dtype} for tensor `{name}`")]
    TensorDtype { name: String, dtype: String },

    #[error("non-finite loss at step {step} (batch indices {indices:?}): {detail}")]
    NonFiniteLoss { step: usize, indices: Vec<usize>, detail: String },

    #[error("checkpoint was written with config hash {found}, current config hashes to {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("tensor archive error: {0}")]
    Archive(#[from] safetensors::SafeTensorError),

    #[error("config parse error: {0}")]
    ConfigParse(#[from] toml::de::Error),

    #[error("config serialize error: {0}")]
    ConfigSerialize(#[from] toml::ser::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
