//! Simulation and limit-law toolkit for the Atlas model.
pub mod analytic;
pub mod dynamics;
pub mod gaussian;
pub mod harness;
pub mod observables;
pub mod quad;
pub mod rng;
pub mod stats;
