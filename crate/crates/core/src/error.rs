use std::path::PathBuf;

/// Errors produced anywhere in the segmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mask has no foreground voxels")]
    EmptyMask,

    #[error("target has no foreground voxels to click")]
    EmptyTarget,

    #[error("prediction equals ground truth, no corrective click available")]
    Converged,

    #[error("every voxel of the error region has already been clicked")]
    ClicksExhausted,

    #[error("point {0:?} lies outside the patch")]
    OutOfPatch([i64; 3]),

    #[error("point {0:?} lies outside the volume")]
    OutOfBounds([usize; 3]),

    #[error("budget of {k} points is not tabulated for {method}")]
    UnsupportedBudget { method: String, k: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("archive format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed weight archive: {0}")]
    Archive(String),

    #[error("nifti: {0}")]
    Nifti(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
