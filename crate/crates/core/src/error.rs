use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("class index {index} at pixel ({row}, {col}) is outside [0, {classes})")]
    ClassOutOfRange { row: usize, col: usize, index: i64, classes: usize },

    #[error("pixel value {value} at offset {offset} is outside [0, 255]")]
    PixelOutOfRange { offset: usize, value: i64 },

    #[error("segmentation is not one-hot at pixel ({row}, {col})")]
    NotOneHot { row: usize, col: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("region template: {0}")]
    Template(String),

    #[error("manifest row {row}: {message}")]
    Manifest { row: usize, message: String },

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },

    #[error("non-finite loss at iteration {iteration}: {parts}")]
    NonFiniteLoss { iteration: u64, parts: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("{0}")]
    InvalidState(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
