//! File formats and command-line front end for `dergrid-core`: JSON
//! scenarios in engineering units, CSV time series, JSON-lines run logs,
//! per-step summaries and run certification.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod runlog;
pub mod scenario;
pub mod timeseries;
pub mod tools;

pub use error::{Error, Result};
