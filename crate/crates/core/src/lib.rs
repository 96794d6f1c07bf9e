//! Deep Koopman model learning and lifted-linear model predictive control.
//!
//! The crate is `no_std` + `alloc`. Everything here is pure computation over
//! explicit state: dense networks and Adam, the learned Koopman model and its
//! training loss, box-constrained condensed MPC, a simulated three-segment
//! soft arm, an RBF/EDMD baseline model, and reference-path generation.
//! File formats and the command-line driver live in the `koopctl` crate.
//!
//! The `std` feature (on by default) only enables runtime SIMD detection in
//! the matrix-multiply kernels.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod baseline;
pub mod data;
pub mod error;
pub mod koopman;
pub mod linalg;
pub mod mpc;
pub mod nn;
pub mod plant;
pub mod tasks;

mod math;

pub use error::{Error, Result};

/// Dimension of the observed state (tip position).
pub const STATE_DIM: usize = 3;
/// Number of pressure channels.
pub const CONTROL_DIM: usize = 9;

/// Tip position, mm (or normalized units after scaling).
pub type State = [f64; STATE_DIM];
/// Chamber pressures, kPa (or normalized units after scaling).
pub type Control = [f64; CONTROL_DIM];
