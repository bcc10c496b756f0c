//! Pipelines behind the `adkit` binary.

pub mod cache;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod render;

pub use config::{Mode, RunConfig};
pub use error::{CliError, ErrorKind};
