use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("empty payload")]
    EmptyPayload,

    #[error("trace of {len} samples is shorter than one segment ({segment} samples)")]
    TraceTooShort { len: usize, segment: usize },

    #[error("frequency grids do not match")]
    GridMismatch,

    #[error("band [{f0}, {f1}] Hz lies outside the spectrum grid")]
    BandOutsideGrid { f0: f64, f1: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("fit did not converge: {0}")]
    NonConvergence(String),

    #[error("fitted slope is not positive ({0})")]
    NonPositiveSlope(f64),

    #[error("band power {power:e} lies more than 3 sigma below the calibration floor {floor:e}")]
    BelowNoiseFloor { power: f64, floor: f64 },

    #[error("resonance outside the swept band: {0}")]
    ResonanceOutsideBand(String),

    #[error("peak at sweep edge")]
    PeakAtEdge,

    #[error("unstable fit: {failed} of {total} bootstrap replicas failed")]
    UnstableFit { failed: usize, total: usize },

    #[error("unstable discretization: {0}")]
    UnstableDiscretization(String),

    #[error("plateau starting at index {start} has only {len} points")]
    PlateauTooShort { start: usize, len: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
