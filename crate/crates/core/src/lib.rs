//! Simulation and validation of reflected generalized backward doubly
//! stochastic differential equations on smooth bounded domains.

pub mod bdsde;
pub mod coefficients;
pub mod doss;
pub mod error;
pub mod field;
pub mod fixpoint;
pub mod geometry;
pub mod noise;
pub mod reflected_sde;
pub mod regression;
pub mod scenario;

pub use error::{Error, Result};
