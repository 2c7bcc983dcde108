use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("spacing must be strictly positive on every axis, got {0:?}")]
    NonPositiveSpacing(Vec<f64>),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u32, num_classes: usize },

    #[error("missing sidecar {0}")]
    MissingSidecar(PathBuf),

    #[error("malformed sidecar {path}: {reason}")]
    BadSidecar { path: PathBuf, reason: String },

    #[error("payload {path} holds {actual} bytes, header implies {expected}")]
    ByteCount { path: PathBuf, expected: usize, actual: usize },

    #[error("weight vector has length {actual}, layout expects {expected}")]
    WeightLength { expected: usize, actual: usize },

    #[error("spatial size {shape:?} not divisible by {multiple}; pad with pad_to_multiple first")]
    Indivisible { shape: Vec<usize>, multiple: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible phantom: {0}")]
    Infeasible(String),

    #[error("spacing range {range:?} lies below reference spacing {reference:?}")]
    BelowReference { range: Vec<(f64, f64)>, reference: Vec<f64> },

    #[error("patch of {patch_mm} mm exceeds volume extent {extent_mm:?} mm")]
    PatchTooLarge { patch_mm: f64, extent_mm: Vec<f64> },

    #[error("non-finite loss {loss} at step {step} (spacing {spacing:?})")]
    NonFiniteLoss { step: usize, spacing: Vec<f64>, loss: f64 },

    #[error("checkpoint holds a {found} model, expected {expected}")]
    RegimeMismatch { expected: String, found: String },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("crop {crop_mm:?} mm does not fit image extent {extent_mm:?} mm")]
    CropOutside { crop_mm: Vec<f64>, extent_mm: Vec<f64> },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
