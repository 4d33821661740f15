use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid video metadata: {0}")]
    InvalidMeta(String),

    #[error("invalid class distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("instance curve needs at least one labeled frame")]
    EmptyCurve,

    #[error("localization matrices differ in size: {a:?} vs {b:?}")]
    DimensionMismatch { a: (usize, usize), b: (usize, usize) },

    #[error("frame {0} has no temporal neighbor")]
    NoNeighbor(usize),

    #[error("no unlabeled frames to score")]
    EmptyPool,

    #[error("guiding set is empty")]
    EmptyGuidingSet,

    #[error("loop has stopped: {labeled} of {target} target frames labeled")]
    Stopped { labeled: usize, target: usize },

    #[error("iteration {iteration} still has {pending} pending annotations")]
    BatchPending { iteration: usize, pending: usize },

    #[error("missing detections for frame {frame} (iteration {iteration})")]
    MissingDetections { frame: usize, iteration: usize },

    #[error("frame {0} is not pending annotation")]
    NotPending(usize),

    #[error("frame {0} is already annotated")]
    DuplicateAnnotation(usize),

    #[error("no completed query batch yet")]
    NoCompletedBatch,

    #[error("frame index {index} out of range for {frames} frames")]
    FrameOutOfRange { index: usize, frames: usize },

    #[error("schema mismatch: expected {expected}, found {found}")]
    Schema { expected: String, found: String },

    #[error("corrupt state: {0}")]
    CorruptState(String),

    #[error("adapter failure (iteration {iteration}): {detail}")]
    Adapter { iteration: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("no ground truth to evaluate against")]
    NoGroundTruth,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
