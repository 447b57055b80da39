use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NearError>;

#[derive(Debug, Error)]
pub enum NearError {
    #[error("failed to read or write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {what}: {source}")]
    Parse {
        what: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("embedding for {id} has length {got}, expected {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        got: usize,
    },

    #[error("label {0:?} has no entry in label_embeddings")]
    MissingLabelEmbedding(String),

    #[error("embedding for {id} has norm {norm}, too far from unit length")]
    NonUnitEmbedding { id: String, norm: f64 },

    #[error("duplicate image id {0:?}")]
    DuplicateId(String),

    #[error("image {0:?} has an empty mllm_label")]
    EmptyLabel(String),

    #[error("dataset has no images")]
    EmptyDataset,

    #[error("label {0:?} is not in the label space")]
    UnknownLabel(String),

    #[error("neighbor count {kappa} must lie in 1..={n}")]
    InvalidNeighborCount { kappa: usize, n: usize },

    #[error("mixture fit needs at least 2 losses, got {0}")]
    TooFewSamples(usize),

    #[error("loss value at index {0} is not finite")]
    NonFiniteLoss(usize),

    #[error("class weight vector {0} has vanishing norm")]
    DegenerateWeight(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("distribution and confidence vector do not overlap")]
    EmptyOverlap,

    #[error("cannot sharpen an all-zero vector")]
    ZeroDistribution,

    #[error("epoch {epoch} outside 1..={total}")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("image {0:?} has no ground-truth label")]
    MissingGroundTruth(String),
}
