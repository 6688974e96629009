//! Risk-bounded kinodynamic motion planning for nonlinear robots among
//! uncertain obstacles.
//!
//! The stack couples an Unscented Kalman Filter (with a decorrelation scheme
//! for cross-correlated process/sensor noise), a multiple-shooting nonlinear
//! MPC steering law, a sampling-based planner over state *distributions*, and
//! distributionally robust collision risk checks. A Monte-Carlo harness
//! validates the risk bounds empirically.

pub mod cli;
pub mod control;
pub mod env_model;
pub mod error;
pub mod estimation;
pub mod linalg;
pub mod planner;
pub mod risk;
pub mod scenario;
pub mod simulation;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
