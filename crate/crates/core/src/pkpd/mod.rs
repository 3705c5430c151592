//! Paclitaxel PK and bone-marrow-exhaustion PD model.

pub mod model;
pub mod observe;
pub mod simulate;
pub mod system;

pub use model::{
    IndividualParameters, OccasionParams, PatientCovariates, PopulationModel, Sex, IIV_DIM,
    IOV_DIM,
};
pub use observe::Observation;
pub use simulate::{Dose, DoseRegimen, Observable, Simulator, Trajectory};
