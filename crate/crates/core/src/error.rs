use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Variants carry enough context to be actionable
/// from the command line without a backtrace.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyCloud,

    #[error("non-finite coordinate at point index {index}")]
    NonFinitePoint { index: usize },

    #[error("query ({x}, {y}) outside the normalized domain [-1, 1]")]
    OutOfDomain { x: f64, y: f64 },

    #[error("point cloud is in frame {found:?}, expected {expected:?}")]
    WrongFrame {
        expected: crate::geom::Frame,
        found: crate::geom::Frame,
    },

    #[error("malformed PLY header: {0}")]
    PlyHeader(String),

    #[error("unsupported PLY format: {0}")]
    PlyUnsupported(String),

    #[error("truncated PLY body: expected {expected} vertices, got {actual}")]
    PlyTruncated { expected: usize, actual: usize },

    #[error("malformed OBJ at line {line}: {msg}")]
    ObjParse { line: usize, msg: String },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("invalid checkpoint file: {0}")]
    Checkpoint(String),

    #[error("invalid camera file at line {line}: {msg}")]
    CameraFile { line: usize, msg: String },

    #[error("invalid scene file at line {line}: {msg}")]
    SceneFile { line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("optimization diverged at step {step}: total loss is not finite")]
    Diverged { step: usize },

    #[error("atlas overflow: {needed} steep-chart texels exceed the {available} available; use a larger atlas")]
    AtlasOverflow { needed: usize, available: usize },

    #[error("no view covers any texel")]
    NoCoverage,

    #[error("enhancer hook failed on view {view}: {msg}")]
    HookFailed { view: usize, msg: String },

    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
