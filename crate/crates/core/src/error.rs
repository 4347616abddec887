use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("malformed header {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("size mismatch in {path}: header declares {expected} bytes, payload has {actual}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("unsupported element type {0}")]
    UnsupportedElementType(String),

    #[error("unknown material label {0}")]
    UnknownLabel(i64),

    #[error("invalid material table: {0}")]
    InvalidMaterialTable(String),

    #[error("volume dims {dims:?} too small: {reason}")]
    DimsTooSmall { dims: [usize; 3], reason: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("truncation interval [{min}, {max}] has negligible gamma mass ({mass:e})")]
    NegligibleMass { min: f64, max: f64, mass: f64 },

    #[error("no valid placement after {attempts} attempts")]
    NoValidPlacement { attempts: usize },

    #[error("placement out of bounds: {0}")]
    PlacementOutOfBounds(String),

    #[error("slice z={z} mm outside volume z-range [{lo}, {hi}]")]
    InvalidSlice { z: f64, lo: f64, hi: f64 },

    #[error("insufficient angular coverage: {coverage:.4} rad < required {required:.4} rad")]
    InsufficientCoverage { coverage: f64, required: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("fit did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NotConverged { iterations: usize, grad_norm: f64 },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
