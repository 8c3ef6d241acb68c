//! Command-line pipeline around the `phaseuq` library: configuration,
//! artifact formats, run directories and the stage implementations.

// `!(x > 0.0)` is used on purpose so NaN is rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod pipeline;
pub mod rundir;
pub mod tensor;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use pipeline::{run_demo, run_stage, Context, Stage};
