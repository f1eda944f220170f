//! Mixture cure models with an additive (Aalen) latency hazard.
//!
//! The susceptible fraction follows `pi(x'gamma)` with the logistic link and
//! susceptible subjects have hazard `z'beta(t)`. The crate simulates such data,
//! fits the nonparametric and the locally constant estimators with an EM-type
//! algorithm, and computes sandwich standard errors.

pub mod aalen;
pub mod config;
pub mod error;
pub mod estimates;
pub mod experiment;
pub mod fit;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod model;
pub mod quad;
pub mod simulate;

pub use error::{Error, Result};
