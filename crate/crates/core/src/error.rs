use thiserror::Error;

/// Errors raised by the pipeline stages.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("rotation angle too close to pi for an unambiguous logarithm (|trace + 1| = {0:e})")]
    AngleNearPi(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("model has {0} joints; the 6x6 Gram determinant is identically zero below 6")]
    RankDeficientModel(usize),

    #[error("invalid robot model: {0}")]
    InvalidModel(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("tracking diverged at t = {t}: linear error {error} m exceeds bound {bound} m")]
    DivergedTracking { t: f64, error: f64, bound: f64 },

    #[error("trajectory duration is zero")]
    ZeroDuration,

    #[error("no grid scenario converged")]
    AllDiverged,

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("only {present} usable markers, need at least 3")]
    TooFewMarkers { present: usize },

    #[error("marker geometry is degenerate (collinear)")]
    DegenerateGeometry,

    #[error("no frame could be registered")]
    NoRegistrableFrames,

    #[error("component {component} collapsed (weight {weight:e}) after reseeding")]
    DegenerateComponent { component: usize, weight: f64 },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("torque limit exceeded on joint {joint} at t = {t}: |{tau}| > {limit}")]
    TorqueLimitExceeded { joint: usize, t: f64, tau: f64, limit: f64 },

    #[error("wrench frames differ: {0} vs {1}")]
    FrameMismatch(String, String),

    #[error("wrench series do not overlap in time")]
    NoOverlap,

    #[error("window [{0}, {1}] is outside the series time range")]
    WindowOutOfRange(f64, f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        Error::Io { path: path.display().to_string(), msg: e.to_string() }
    }

    pub(crate) fn parse(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        Error::Parse { path: path.display().to_string(), msg: e.to_string() }
    }
}
