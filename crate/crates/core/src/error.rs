use thiserror::Error;

use crate::world::VehicleId;

#[derive(Debug, Error)]
pub enum CpeError {
    #[error("ego not found")]
    EgoNotFound,

    #[error("vehicle {0} not found")]
    VehicleNotFound(VehicleId),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("cannot replace PUT (vehicle {0} is the ego)")]
    CannotReplacePut(VehicleId),

    #[error("empty trajectory set")]
    EmptyTrajectories,

    #[error("empty probability map")]
    EmptyProbabilities,

    #[error("mismatched horizons: baseline has {baseline} steps, rollout has {rollout}")]
    HorizonMismatch { baseline: usize, rollout: usize },

    #[error("horizon {horizon} s is not a positive multiple of dt {dt} s")]
    InvalidHorizon { horizon: f64, dt: f64 },

    #[error("observation has dimension {0}, expected 20")]
    ObservationDimension(usize),

    #[error("policy layer {layer}: {reason}")]
    LayerShape { layer: usize, reason: String },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("config over-dense: no valid placement after {0} attempts")]
    OverDense(usize),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid map: {0}")]
    InvalidMap(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for CpeError {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            return CpeError::Io(std::io::Error::other(e.to_string()));
        }
        CpeError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CpeError>;
