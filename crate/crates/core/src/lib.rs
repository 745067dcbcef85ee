//! Robust taxi dispatch under data-driven demand uncertainty.
//!
//! The crate is organised bottom-up:
//! - [`ingest`]: trips, grids, demand samples, synthetic generator
//! - [`uncertainty`]: box, polytope and SOC uncertainty sets
//! - [`model`]: dispatch instance, cost functions and fleet dynamics
//! - [`reform`]: convex programs for the robust counterparts
//! - [`solve`]: interior-point solver, oracles, rounding and checks
//! - [`harness`]: receding-horizon simulation, cross-validation, sweeps

pub mod error;
pub mod golden;
pub mod harness;
pub mod ingest;
pub mod model;
pub mod reform;
pub mod solve;
pub mod textfmt;
pub mod uncertainty;

pub use error::{Error, Result};
