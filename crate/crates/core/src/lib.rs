//! Simulation and analysis of an open quantum system driven by repeated,
//! Poisson-timed projective measurements of a reservoir.
//!
//! A central system `A` is coupled to a reservoir `B` that is drawn from a
//! thermal state, evolved jointly for a random interval, measured in its
//! energy basis and then replaced. The crate provides the exact process
//! ([`engine`]), thermodynamic accounting ([`thermo`]), closed-form
//! Jaynes-Cummings results ([`analytic`]) and the weak- and fast-coupling
//! master-equation limits ([`generators`]).
//!
//! Units: ħ = k_B = 1.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod analytic;
pub mod engine;
pub mod error;
pub mod generators;
pub mod models;
pub mod qcore;
pub mod quad;
pub mod thermo;

pub use error::{Error, Result};
