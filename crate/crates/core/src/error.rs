use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("manifest not found: {0}")]
    MissingManifest(PathBuf),

    #[error("{path}: row {row}: malformed row: {reason}")]
    MalformedRow {
        path: PathBuf,
        row: usize,
        reason: String,
    },

    #[error("{path}: row {row}: image file missing: {image}")]
    MissingImage {
        path: PathBuf,
        row: usize,
        image: PathBuf,
    },

    #[error("{path}: row {row}: cannot decode image {image}: {reason}")]
    UnreadableImage {
        path: PathBuf,
        row: usize,
        image: PathBuf,
        reason: String,
    },

    #[error("{path}: row {row}: duplicate image_id `{image_id}`")]
    DuplicateImageId {
        path: PathBuf,
        row: usize,
        image_id: String,
    },

    #[error("image `{image_id}` has shape {found:?}, dataset declares {expected:?}")]
    ShapeMismatch {
        image_id: String,
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },

    #[error("dataset mixes labelled and unlabelled records")]
    MixedLabelling,

    #[error("invalid synthetic spec: {0}")]
    InvalidSynthetic(String),

    #[error("identity {person_id} has images in camera {camera_id} only; cross-camera protocol needs two views")]
    SingleCameraIdentity { person_id: u32, camera_id: u32 },

    #[error("dataset `{0}` is unlabelled")]
    Unlabelled(String),

    #[error("sampling: {0}")]
    Sampling(String),

    #[error("no positive pair available in batch")]
    NoPositivePairs,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("pairwise-consistent dropout requires a pairing")]
    MissingPairing,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("head `{head}` is enabled but {missing} are missing")]
    MissingHeadInput { head: String, missing: &'static str },

    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("non-finite loss at iteration {iter}: {detail}")]
    NonFiniteLoss { iter: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("probe identity {0} has no gallery match")]
    ProbeWithoutMatch(u32),

    #[error("affinity matrix is not symmetric")]
    AsymmetricAffinity,

    #[error("k = {k} exceeds opposite-view size {available}")]
    KnnTooLarge { k: usize, available: usize },

    #[error("solver: {0}")]
    Solver(String),

    #[error("need at least {needed} pseudo-classes, found {found}")]
    TooFewClasses { needed: usize, found: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encode: {0}")]
    Image(#[from] image::ImageError),
}
