use std::path::PathBuf;

use thiserror::Error;

use crate::pairs::BoundingBox;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no annotation record for image {0}")]
    MissingAnnotation(u64),

    #[error("roi {roi:?} does not fit a {width}x{height} image")]
    InvalidRoi {
        roi: BoundingBox,
        width: u32,
        height: u32,
    },

    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("batch of {0} rows is too small; at least 2 are required")]
    InsufficientBatch(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("classes absent from training labels: {0:?}")]
    MissingClasses(Vec<String>),

    #[error("unknown class {0}")]
    UnknownClass(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("unknown architecture {0:?}")]
    UnknownArch(String),

    #[error("grid size {0} does not divide the map side")]
    GridSize(usize),

    #[error("click logs mix image/target pairs: {0}")]
    MixedLogs(String),

    #[error("could not place {0} objects on the canvas")]
    Placement(usize),

    #[error("output {0} already exists")]
    OutputExists(PathBuf),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
