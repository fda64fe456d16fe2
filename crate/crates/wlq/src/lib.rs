//! Stochastic linear-quadratic control with an exponentially weighted
//! (recursive) cost on an infinite horizon.
//!
//! The library tests weighted L2-stability and stabilizability, synthesizes
//! the optimal closed-loop feedback through an algebraic Riccati equation,
//! and verifies optimality by Monte Carlo simulation of the state dynamics
//! and the adjoint stationarity condition. The `wlq` binary exposes the
//! pipeline as subcommands; see the README for the file formats.

pub mod cli;
pub mod error;
pub mod mc;
pub mod model;
pub mod stability;
pub mod synthesis;
pub mod transform;
pub mod weight;

pub use error::{Result, WlqError};
