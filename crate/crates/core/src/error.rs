use std::path::PathBuf;

use thiserror::Error;

use crate::types::LossBreakdown;

pub type Result<T> = std::result::Result<T, CksError>;

#[derive(Debug, Error)]
pub enum CksError {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("value {value} out of range at (row {}, col {})", index.0, index.1)]
    ValueOutOfRange { index: (usize, usize), value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("input {height}x{width} is not a multiple of the backbone alignment {align}")]
    AlignmentError { height: usize, width: usize, align: usize },

    #[error("parameter layout mismatch: expected `{expected}`, found `{found}`")]
    LayoutMismatch { expected: String, found: String },

    #[error("non-finite loss at step {step}: {breakdown:?}")]
    NonFiniteLoss { step: u64, breakdown: LossBreakdown },

    #[error("momentum coefficient {0} outside [0, 1]")]
    AlphaOutOfRange(f64),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("length mismatch: {predictions} predictions vs {truths} ground truths")]
    LengthMismatch { predictions: usize, truths: usize },

    #[error("cannot split {items} items into {k} folds")]
    BadFoldCount { k: usize, items: usize },

    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("bad image depth in {}: {detail}", path.display())]
    BadImageDepth { path: PathBuf, detail: String },

    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),

    #[error("parameter count mismatch: expected {expected}, found {found}")]
    CountMismatch { expected: u64, found: u64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("phase {phase}: {source}")]
    InPhase {
        phase: String,
        #[source]
        source: Box<CksError>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CksError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CksError::Io {
            path: path.into(),
            source,
        }
    }
}
