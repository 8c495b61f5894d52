use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SsgaError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("frame {height}x{width} is not compatible with stride {stride} (minimum 16, divisible by stride)")]
    FrameDimensions {
        height: usize,
        width: usize,
        stride: usize,
    },
    #[error("degenerate box: {0}")]
    DegenerateBox(String),
    #[error("matching needs at least as many predictions as ground truths ({n_pred} < {n_gt})")]
    TooFewPredictions { n_pred: usize, n_gt: usize },
    #[error("frame {frame_id} is not before the current frame {current_id}")]
    FutureFrame { frame_id: u64, current_id: u64 },
    #[error("frame id {frame_id} must be greater than the last pushed id {last_id}")]
    NonMonotonicFrame { frame_id: u64, last_id: u64 },
    #[error("stage {stage} exceeds the configured {num_stages} stages")]
    StageOverflow { stage: usize, num_stages: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown {kind} '{name}' (registered: {registered})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        registered: String,
    },
    #[error("invalid scene: {0}")]
    Scene(String),
    #[error("invalid annotation in {path}: frame {frame_id}, object {object}: {reason}")]
    Annotation {
        path: PathBuf,
        frame_id: u64,
        object: usize,
        reason: String,
    },
    #[error("dataset error at {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SsgaError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> SsgaError {
    let path = path.into();
    move |source| SsgaError::Io { path, source }
}
