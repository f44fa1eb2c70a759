//! Files, runs and the command line around `eac-core`.

pub mod analyze;
pub mod cli;
pub mod error;
pub mod io;
pub mod runner;
pub mod synth;

pub use error::{CliError, Result};
