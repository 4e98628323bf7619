//! The `hypercell` pipeline: benchmark, search, derive, retrain, evaluate and
//! export, each stage persisting its artifacts in a run directory.

pub mod commands;
pub mod error;
pub mod plots;
pub mod run;

pub use commands::{run, Cli, Command, GlobalArgs};
pub use error::{CliError, CliResult};
pub use run::{Run, RunManifest};
