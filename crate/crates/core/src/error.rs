use thiserror::Error;

/// Errors produced by the voxel pipeline, the autodiff engine, and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty point cloud")]
    EmptyPointCloud,

    #[error("invalid coordinate: point {index} has a non-finite component")]
    InvalidCoordinate { index: usize },

    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("channel mismatch: expected {expected} feature channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("empty grid: operation requires at least one voxel")]
    EmptyGrid,

    #[error("degenerate batch statistics: train-mode normalization needs at least 2 rows")]
    DegenerateBatchStats,

    #[error("degenerate batch: no anchor has both a positive and a negative")]
    DegenerateBatch,

    #[error("scene too small: no voxels survive striding")]
    SceneTooSmall,

    #[error("non-scalar loss: backward seed must be a 1x1 node, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("bad magic")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),

    #[error("variant mismatch: checkpoint holds {found}, expected {expected}")]
    VariantMismatch { found: String, expected: String },

    #[error("truncated file")]
    Truncated,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
