//! Command-line front end for the transfer simulator: configuration files,
//! seeded reproducible runs, schedule persistence, CSV export, and the
//! identity-check suite.
//!
//! The binary is thin; everything testable lives here. [`config`] turns a
//! JSON file plus command-line overrides into normalized-unit settings,
//! [`files`] owns the on-disk artifact formats, [`verify`] runs the
//! consistency checks, and [`commands`] wires those into the subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod files;
pub mod verify;

pub use error::{CliError, CliResult};
