//! Coded-illumination quantitative phase imaging with uncertainty
//! quantification: optics simulation, model-based reconstruction,
//! preprocessing, a heteroscedastic convolutional regressor and Bayesian
//! reliability analytics.

// `!(x > 0.0)` is used on purpose so NaN is rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod grid;
pub mod learner;
pub mod optics;
pub mod phantom;
pub mod preprocess;
pub mod recon;
pub mod uqstats;

pub use error::{Error, Result};
pub use grid::{ComplexRaster, RealRaster};
