//! Model-informed precision dosing for paclitaxel-induced neutropenia.

pub mod cohort;
pub mod darl;
pub mod error;
pub mod harness;
pub mod inference;
pub mod ode;
pub mod optimize;
pub mod pkpd;
pub mod planner;
pub mod policies;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision instantiations of the generic numerical types.
pub type Simulator = pkpd::simulate::Simulator<f64>;
pub type Trajectory = pkpd::simulate::Trajectory<f64>;
pub type CycleRun = pkpd::simulate::CycleRun<f64>;
pub type PkPdSystem = pkpd::system::PkPdSystem<f64>;
pub type PkSystem = pkpd::system::PkSystem<f64>;
pub type Minimum = optimize::Minimum<f64>;
pub type SimplexMinimum = optimize::SimplexMinimum<f64>;
