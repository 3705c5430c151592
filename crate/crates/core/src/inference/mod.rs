//! Per-patient Bayesian inference: particle filtering and MAP estimation.

pub mod filter;
pub mod map;
pub mod patient;

pub use filter::{assimilate, Ensemble, FilterConfig, StateSpaceModel, UpdateSummary};
pub use map::{MapConfig, MapEstimate, MapParameter, MapProblem};
pub use patient::{PatientEnsemble, PatientModel, PkPdMember, PredictiveMember};
