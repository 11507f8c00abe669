use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("stain matrix is singular or ill-conditioned (condition number {condition:.3e})")]
    SingularStainMatrix { condition: f64 },

    #[error("stain matrix row {row} has norm {norm}, expected 1")]
    NonUnitStainRow { row: usize, norm: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("cannot pack {requested} nuclei into a {height}x{width} canvas")]
    InfeasiblePacking { requested: usize, height: usize, width: usize },

    #[error("overlapping scene index ranges: {0}")]
    OverlappingSplits(String),

    #[error("missing loss term `{0}`")]
    MissingTerm(String),

    #[error("training diverged at step {step}: total generator loss {value}")]
    Diverged { step: u64, value: f64 },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("dataset error in {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }
}
