//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("gradient requested of a non-scalar output with shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("incomposable model spec: {detail}")]
    BadModelSpec { detail: String },

    #[error("image pixel out of [0,1] range: {detail}")]
    ImageRange { detail: String },

    #[error("degenerate saliency: raw relevance map is identically zero")]
    DegenerateSaliency,

    #[error("explanation attack produced a non-finite loss at iteration {iteration}")]
    AttackDiverged { iteration: usize },

    #[error("parse error at byte offset {offset}: {detail}")]
    Parse { offset: u64, detail: String },

    #[error("k-means: k={k} exceeds number of points {points}")]
    TooFewPoints { k: usize, points: usize },

    #[error("cluster {cluster} has only {members} members, fewer than per_cluster={per_cluster}; use a smaller per_cluster")]
    ClusterTooSmall {
        cluster: usize,
        members: usize,
        per_cluster: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("digest mismatch: {0}")]
    Digest(String),

    #[error("training aborted: non-finite loss at epoch {epoch}, batch {batch}")]
    TrainDiverged { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
