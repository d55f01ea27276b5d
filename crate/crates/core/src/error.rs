use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pose-estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point coincides with the camera center")]
    DegeneratePoint,
    #[error("point or pixel lies outside the camera field of view")]
    OutsideFov,
    #[error("distortion inversion did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("subject height {0} m is outside [1.2, 2.2]")]
    HeightOutOfRange(f64),
    #[error("no image for the {0} camera")]
    MissingImage(String),
    #[error("unknown joint label `{0}`")]
    UnknownJointLabel(String),
    #[error("energy evaluated to a non-finite value")]
    NonFiniteEnergy,
    #[error("background {bg_width}x{bg_height} is smaller than foreground {fg_width}x{fg_height}")]
    BackgroundTooSmall {
        fg_width: u32,
        fg_height: u32,
        bg_width: u32,
        bg_height: u32,
    },
    #[error("label sets differ: {0}")]
    LabelMismatch(String),
    #[error("sequence lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    /// A value violated a documented invariant (bad calibration, malformed skeleton, ...).
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    /// True for failures of the numerics rather than of the input data.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFiniteEnergy | Error::NoConvergence { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
