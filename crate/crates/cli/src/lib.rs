//! Command-line front end: run configs, subcommands, manifests and plots.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod plot;

pub use cli::Cli;
pub use commands::run;
