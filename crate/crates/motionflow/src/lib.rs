//! File formats, parallel orchestration and the command line for
//! [`motionflow_core`].

pub mod cli;
pub mod error;
pub mod io;
pub mod manifest;
pub mod parallel;

pub use error::{CliError, CliResult};
pub use motionflow_core as core;
