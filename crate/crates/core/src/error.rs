use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("pose ({x:.3}, {y:.3}) lies in an occupied cell")]
    PoseInCollision { x: f64, y: f64 },

    #[error("pose ({x:.3}, {y:.3}) lies outside the map")]
    PoseOutsideMap { x: f64, y: f64 },

    #[error("LED apparent diameter {diameter_px:.2} px is below the {min_px:.2} px minimum")]
    LedTooSmall { diameter_px: f64, min_px: f64 },

    #[error("observation is for beacon {observed} but beacon {expected} was supplied")]
    BeaconMismatch { observed: u32, expected: u32 },

    #[error("unknown beacon id {0}")]
    UnknownBeacon(u32),

    #[error("duplicate beacon id {0}")]
    DuplicateBeacon(u32),

    #[error("grid has no occupied cells")]
    NoOccupiedCells,

    #[error("covariance is not positive semidefinite")]
    NotPositiveSemidefinite,

    #[error("map anchor was already set")]
    AlreadyAnchored,

    #[error("invalid goal: {0}")]
    InvalidGoal(String),

    #[error("goal is unreachable")]
    Unreachable,

    #[error("filter has not been initialized")]
    Uninitialized,

    #[error("measurement at t={stamp:.3} s is more than 1 s ahead of the filter clock t={now:.3} s")]
    ClockFault { stamp: f64, now: f64 },

    #[error("sensor log is empty")]
    EmptyLog,

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
