use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    DomainError { op: &'static str, detail: String },

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tape already consumed by a previous backward pass; reset it first")]
    TapeConsumed,

    #[error("batch of {0} elements per channel is too small for batch statistics")]
    DegenerateBatch(usize),

    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f64),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),

    #[error("batch norm running statistics are not populated")]
    UnpopulatedStats,

    #[error("unsupported geometry: {0}")]
    GeometryUnsupported(String),

    #[error("parameter {0} has no gradient")]
    MissingGrad(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("depth {0} outside the supported range 4..=6")]
    InvalidDepth(usize),

    #[error("graph contains no series activation layers")]
    NoSeriesLayers,

    #[error("need at least {needed} recorded epochs, have {have}")]
    InsufficientHistory { needed: usize, have: usize },

    #[error("class selectivity needs at least two classes present")]
    SingleClass,

    #[error("latency benchmark needs at least one timed iteration")]
    InsufficientIters,

    #[error("unknown layer {0}")]
    UnknownLayer(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("missing file {}", .0.display())]
    FileMissing(PathBuf),

    #[error("corrupt record in {}: {detail}", .path.display())]
    CorruptRecord { path: PathBuf, detail: String },

    #[error("bad magic {found:#010x} in {}, expected {expected:#010x}", .path.display())]
    BadMagic { path: PathBuf, found: u32, expected: u32 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("checkpoint tensor {name}: {detail}")]
    CheckpointShape { name: String, detail: String },

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
