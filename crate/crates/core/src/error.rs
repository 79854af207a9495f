use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("projection axis has zero norm")]
    ZeroAxis,

    #[error("malformed checkpoint header: {0}")]
    MalformedHeader(String),

    #[error("tensor data region invalid: {0}")]
    OffsetOverlap(String),

    #[error("unsupported dtype {dtype} for tensor {name}")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unknown activation {0:?}")]
    UnknownActivation(String),

    #[error("tensor {0:?} referenced by the manifest is missing")]
    MissingTensor(String),

    #[error("metric requires labels but batch {0:?} has none")]
    MissingLabels(String),

    #[error("training loss became non-finite at epoch {epoch}")]
    DivergedLoss { epoch: usize },

    #[error("task vector base fingerprint does not match the pretrained weights")]
    BaseMismatch,

    #[error("operation needs at least one input")]
    EmptyInput,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("merged task feature at layer {layer} is degenerate (norm below threshold)")]
    DegenerateFeature { layer: usize },

    #[error("merged task vector layer is zero")]
    ZeroMerged,

    #[error("closed-form scale undefined: the merged task feature is zero")]
    DegenerateInput,

    #[error("report serialisation failed: {0}")]
    Report(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
