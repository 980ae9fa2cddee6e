use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {path}: {message}")]
    Codec { path: PathBuf, message: String },

    #[error("no records found under {0}")]
    NoRecords(PathBuf),

    #[error("malformed file name: {0}")]
    MalformedName(PathBuf),

    #[error("duplicate record for {key}: {first} and {second}")]
    DuplicateRecord {
        key: String,
        first: PathBuf,
        second: PathBuf,
    },

    #[error("invalid dimensions: expected {expected_w}x{expected_h}, got {got_w}x{got_h}")]
    Dimensions {
        expected_w: usize,
        expected_h: usize,
        got_w: usize,
        got_h: usize,
    },

    #[error("wrong bit depth: expected 16-bit raster, got {0}")]
    BitDepth(String),

    #[error("invalid contour: {0}")]
    Contour(String),

    #[error("degenerate polygon: zero area")]
    DegeneratePolygon,

    #[error("empty region")]
    EmptyRegion,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid split: {0}")]
    Split(String),

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("missing centroid cells: {0}")]
    MissingCells(String),

    #[error("missing data: {0}")]
    Missing(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: usize },

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
