//! Feedback-based online optimization of distributed energy resources.
//!
//! The crate is `no_std` with `alloc`. It contains the multiphase network and
//! power-flow plant, linear sensitivity models, operating-region algebra with
//! Minkowski-sum aggregation, the bi-level disaggregation solver, the online
//! primal-dual controller, convergence analysis and a closed-loop simulator.
//! File formats and the command-line front end live in the `dergrid` crate.

#![no_std]
// negated comparisons reject NaN inputs
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod aggregation;
pub mod analysis;
pub mod controller;
pub mod error;
pub mod feeders;
pub mod network;
pub mod powerflow;
pub mod regions;
pub mod sensitivity;
pub mod sim;

pub use error::{Error, Result};

pub use nalgebra;
pub use num_complex::Complex64;
