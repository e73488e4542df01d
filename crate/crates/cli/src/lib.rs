//! File formats, configuration loading and run directories for the `craft`
//! command.

pub mod config;
pub mod formats;
pub mod output;
