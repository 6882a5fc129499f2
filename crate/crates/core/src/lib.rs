//! Probabilistic displacement-field localization.
//!
//! A scene encoder fuses a ground-view token grid with a satellite token grid
//! into a visual context. A regression field maps any candidate location
//! (plus that context) to a Gaussian over distance and a von Mises-Fisher
//! distribution over direction toward the true location. Iterative refinement
//! sampling moves a population of hypotheses along the predicted mean
//! displacements and reports their mean.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod distributions;
pub mod encoder;
pub mod error;
pub mod field;
pub mod irs;
pub mod metrics;
pub mod model;
pub mod synthenv;
pub mod trainer;

pub use error::{Error, Result};
