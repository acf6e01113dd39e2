use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate point: homogeneous coordinate {w:e} is too close to zero")]
    DegeneratePoint { w: f64 },
    #[error("invalid scale factor ({sx}, {sy}); both must be positive")]
    InvalidScale { sx: f64, sy: f64 },
    #[error("degenerate transform: {0}")]
    Degenerate(String),
    #[error("backward map is undefined at ({x}, {y})")]
    OutOfDomain { x: f64, y: f64 },
    #[error("singular jacobian (det = {det:e})")]
    SingularJacobian { det: f64 },
    #[error("no non-degenerate transform after {attempts} draws")]
    ResampleRejected { attempts: usize },
    #[error("invalid transform parameters: {0}")]
    InvalidParams(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask has no valid pixels")]
    EmptyMask,
    #[error("no valid square of side >= {min_side} in the warped region")]
    NoValidSquare { min_side: usize },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
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
