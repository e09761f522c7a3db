use std::path::PathBuf;

use thiserror::Error;

/// Shape and indexing failures raised while building a [`crate::graph::Graph`].
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("width {width} is not divisible into {heads} heads")]
    Heads { width: usize, heads: usize },
    #[error("segments cover {covered} rows of {rows}")]
    Segments { rows: usize, covered: usize },
    #[error("backward seed must be a single element, got shape {shape:?}")]
    NonScalarSeed { shape: Vec<usize> },
}

/// Failures reading or writing the binary checkpoint and corpus formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated file while reading {0}")]
    Truncated(&'static str),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FormatError {
    /// Stable numeric code per failure kind.
    pub fn code(&self) -> u8 {
        match self {
            FormatError::BadMagic { .. } => 1,
            FormatError::UnsupportedVersion(_) => 2,
            FormatError::Truncated(_) => 3,
            FormatError::Malformed(_) => 4,
            FormatError::Io { .. } => 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage provenance violation: expected {expected}, found {found}")]
    Provenance { expected: String, found: String },
    #[error("{what}: mask is empty")]
    EmptyMask { what: &'static str },
    #[error("sequence length {len} exceeds model maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged: loss {loss} at step {step}")]
    Divergence { step: u64, loss: f64 },
    #[error("{0}")]
    Infeasible(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
