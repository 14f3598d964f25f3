use std::path::PathBuf;

use thiserror::Error;

use crate::roi::RoiLabel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what}: expected shape {expected:?}, got {actual:?}")]
    Shape { what: String, expected: Vec<usize>, actual: Vec<usize> },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("label map contains class id {id} which is not in the class table")]
    UnknownClass { id: u16 },
    #[error("no model for ROI(s): {}", .0.iter().map(|r| r.name()).collect::<Vec<_>>().join(", "))]
    MissingRoiModels(Vec<RoiLabel>),
    #[error("injection layer {layer} out of range; valid layers are 0..={max}")]
    InvalidLayer { layer: usize, max: usize },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("unsupported image input: {0}")]
    ImageFormat(String),
    #[error("unknown feature network {0:?}")]
    UnknownEmbedder(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] ssae_tensor::TensorError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(what: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape { what: what.into(), expected: expected.to_vec(), actual: actual.to_vec() }
    }
}
