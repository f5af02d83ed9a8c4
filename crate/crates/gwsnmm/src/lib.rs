//! Geographically weighted, doubly robust estimation of spatially and
//! time-varying treatment effects under local structural nested mean
//! models, with kernel bandwidth selection by a balancing criterion,
//! empirical bias correction, wild-bootstrap inference, and adjustment
//! for informative non-response via an instrument.
//!
//! Start from [`simlab`] to generate synthetic panels, [`panel`] to load
//! real ones, and [`inference::analyze_targets`] to run the full
//! pipeline at a set of evaluation locations. The `examples/` directory
//! has one runnable example per capability.

pub mod blip;
pub mod error;
pub mod gwe;
pub mod inference;
mod linalg;
pub mod nuisance;
pub mod panel;
pub mod simlab;
pub mod tuning;

pub mod cli;

pub use error::{Error, Result};
