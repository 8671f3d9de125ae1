use std::path::PathBuf;

use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate triangle (area {area:.3e} m^2 below threshold)")]
    DegenerateTriangle { area: f64 },

    #[error("point is behind the camera (depth {depth:.3e})")]
    BehindCamera { depth: f64 },

    #[error("frame index {frame} out of range (sequence length {len})")]
    FrameOutOfRange { frame: usize, len: usize },

    #[error("image dimensions differ: {a:?} vs {b:?}")]
    DimensionMismatch { a: (usize, usize), b: (usize, usize) },

    #[error("label vectors differ in length: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },

    #[error("empty sequence")]
    EmptySequence,

    #[error("gradient/parameter shape mismatch in group {group}: {a} vs {b}")]
    ShapeMismatch { group: String, a: usize, b: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("missing file: {path}")]
    MissingFile { path: PathBuf },

    #[error("failed to parse {path}: {reason}")]
    ParseError { path: PathBuf, reason: String },

    #[error("bundle grid incomplete: missing (view {view}, frame {frame}): {path}")]
    GridIncomplete { view: usize, frame: usize, path: PathBuf },

    #[error("face {face} references vertex {index} but template has {vertex_count} vertices")]
    TopologyOutOfRange { face: usize, index: usize, vertex_count: usize },

    #[error("invalid checkpoint: {reason}")]
    BadCheckpoint { reason: String },

    #[error("invalid configuration: {reason}")]
    BadConfig { reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::ParseError { path: path.into(), reason: reason.into() }
    }
}
