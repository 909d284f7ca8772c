//! Command-line pipeline: fetch data, train the baseline, derive
//! representatives, build the augmented dataset, train with and without the
//! concept loss, and analyze the results inside one run directory.

pub mod config;
pub mod error;
pub mod fetch;
pub mod manifest;
pub mod pipeline;

pub use config::RunConfig;
pub use error::CliError;
pub use pipeline::{Outcome, Pipeline};
