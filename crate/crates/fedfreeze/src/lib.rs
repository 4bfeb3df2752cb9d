//! Files, sockets and processes around `fedfreeze-core`: run configs, the
//! message transport with byte accounting, the aggregation server, the
//! experiment runner and traffic reports.

pub mod config;
mod error;
pub mod io;
pub mod report;
pub mod runner;
pub mod server;
pub mod transport;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use runner::{run_experiment, RunOptions, RunOutcome};
