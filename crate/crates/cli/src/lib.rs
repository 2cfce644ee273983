//! Command-line front end for budgetguard: scenario simulation, event-log
//! replay, snapshots, quota derivation and bound checks.
//!
//! Exit codes: 0 success, 1 audit violation, 2 configuration or usage error,
//! 3 I/O or parse error.

pub mod commands;
pub mod config;
pub mod error;

pub use config::ScenarioConfig;
pub use error::CliError;
