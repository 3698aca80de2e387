use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid driving cycle: {0}")]
    InvalidCycle(String),
    #[error("cycle has zero travelled distance")]
    ZeroDistance,
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("invalid transformation targets: {0}")]
    InvalidTargets(String),
    #[error("empty or too short sequence: {0}")]
    EmptySequence(String),
    #[error("quantizer grids do not match")]
    GridMismatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("engine operating point outside envelope: {torque} N·m at {speed} rad/s")]
    OutOfEnvelope { torque: f64, speed: f64 },
    #[error("battery cannot deliver {0} W (negative discriminant)")]
    InfeasiblePower(f64),
    #[error("battery power {0} W outside admissible bounds")]
    PowerLimit(f64),
    #[error("battery current {0} A outside admissible bounds")]
    CurrentLimit(f64),
    #[error("state of charge {0} leaves the admissible window")]
    SocLimit(f64),
    #[error("no feasible action at the initial node")]
    NoFeasiblePath,
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error on {path}")]
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

    /// Errors that stem from bad input files or configuration rather than
    /// from a numerical constraint.
    pub fn is_io_or_config(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Json(_) | Error::Csv(_) | Error::Config(_) | Error::Integrity(_)
        )
    }
}
