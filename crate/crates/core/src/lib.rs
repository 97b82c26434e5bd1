//! Fee-market laboratory: a weight-constrained priority-queue simulator with
//! VCG priority pricing, and a two-stage structural estimator of the
//! fee/delay relationship (monotone delay technology, then a fixed-effects
//! log-fee equation) with clustered and bootstrap inference.

pub mod error;
pub mod delay;
pub mod fee;
pub mod market;
pub mod sim;
pub mod estimate;
pub mod diagnostics;
pub mod io;
pub mod pipeline;

pub use error::{Error, Result};
