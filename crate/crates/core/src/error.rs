use std::path::PathBuf;

use thiserror::Error;

use crate::tracklet::DetectionId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot shift the absent box")]
    ShiftAbsentBox,

    #[error("tracklets disagree on the detection in frame {frame}")]
    MergeConflict { frame: usize },

    #[error("tracklet lengths differ ({left} vs {right} frames)")]
    LengthMismatch { left: usize, right: usize },

    #[error("expected {expected} per-frame detection lists, got {actual}")]
    FrameCountMismatch { expected: usize, actual: usize },

    #[error("no embedding for detection {0}")]
    MissingEmbedding(DetectionId),

    #[error("embedding dimension {actual}, expected {expected}")]
    EmbeddingDim { expected: usize, actual: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("selection pool of {size} hypotheses exceeds the exact-search limit {limit}")]
    PoolTooLarge { size: usize, limit: usize },

    #[error("batch starting at frame {start} does not follow the previous batch (expected {expected})")]
    BatchBoundary { start: usize, expected: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no ground truth available: {0}")]
    NoGroundTruth(&'static str),

    #[error("training diverged at iteration {iteration}: non-finite loss")]
    Diverged { iteration: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("zero ground-truth detections, MOTA undefined")]
    NoGroundTruthDetections,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
