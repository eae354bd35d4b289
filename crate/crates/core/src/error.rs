use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
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

    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {label} out of range for {num_classes} classes in {source_id}")]
    LabelOutOfRange {
        label: u32,
        num_classes: u32,
        source_id: String,
    },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("stage mismatch: step for stage {expected} called while in stage {actual}")]
    WrongStage { expected: u8, actual: u8 },

    #[error("non-finite loss at stage {stage} step {step}: {term}")]
    NonFinite { stage: u8, step: usize, term: String },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag for machine-readable reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Io { .. } => "io",
            Error::Image { .. } | Error::Codec(_) => "image",
            Error::Checkpoint(_) => "checkpoint",
            Error::InvalidInput(_) => "invalid-input",
            Error::Shape(_) => "shape",
            Error::LabelOutOfRange { .. } => "label-range",
            Error::Insufficient(_) => "insufficient-data",
            Error::WrongStage { .. } => "wrong-stage",
            Error::NonFinite { .. } => "non-finite",
            Error::Numerical(_) => "numerical",
        }
    }
}
