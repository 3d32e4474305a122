//! Configuration, manifests and stage orchestration for the `genrec` binary.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

pub use config::{Family, RunConfig, Stage};
pub use error::CliError;
pub use pipeline::{run, Outcome};
