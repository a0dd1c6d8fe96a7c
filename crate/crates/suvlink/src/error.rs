use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the pipeline.
#[derive(Debug, Error)]
pub enum SuvlinkError {
    #[error("unreadable file {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },

    #[error("unsupported dimensionality: {path} has {ndim} dimensions, expected 3")]
    UnsupportedDimensionality { path: PathBuf, ndim: usize },

    #[error("non-positive spacing {spacing:?}")]
    NonPositiveSpacing { spacing: [f32; 3] },

    #[error("write failure at {path}: {reason}")]
    WriteFailure { path: PathBuf, reason: String },

    #[error("slice {slice} out of range 1..={nz}")]
    SliceOutOfRange { slice: i64, nz: usize },

    #[error("volume dimensions {dims:?} outside supported range 1..=4096")]
    DimsOutOfRange { dims: [usize; 3] },

    #[error("mask volume contains non-binary value {value}")]
    NonBinaryMask { value: f32 },

    #[error("geometry mismatch: {left:?} vs {right:?}")]
    GeometryMismatch { left: [usize; 3], right: [usize; 3] },

    #[error("anatomical-entity detector unavailable: {0}")]
    DetectorUnavailable(String),

    #[error("endpoint {endpoint} timed out")]
    EndpointTimeout { endpoint: String },

    #[error("endpoint {endpoint} returned unparseable output: {raw}")]
    MalformedModelOutput { endpoint: String, raw: String },

    #[error("degenerate lesion: refined mask collapsed below one voxel")]
    DegenerateLesion,

    #[error("phantom spec invalid: {0}")]
    SpecInvalid(String),

    #[error("config invalid: {0}")]
    ConfigInvalid(String),

    #[error("input missing: {0}")]
    InputMissing(PathBuf),

    #[error("f1 undefined: tp, fp and fn are all zero")]
    F1Undefined,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SuvlinkError>;
