use thiserror::Error;

use crate::ode::OdeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid covariate `{field}`: {reason}")]
    InvalidCovariate { field: &'static str, reason: String },
    #[error("invalid population model: {0}")]
    InvalidModel(String),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("ODE solver failed: {0}")]
    Solver(#[from] OdeError),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("empty window [{start}, {end}]")]
    EmptyWindow { start: f64, end: f64 },
    #[error("degenerate filter update: all likelihoods vanished")]
    DegenerateUpdate,
    #[error("state has a complete grade history (leaf) and needs no decision")]
    LeafState,
    #[error("exposure measure required for cycle {cycle}")]
    MissingExposure { cycle: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
