//! Command-line front end for the coordination trainer: experiment configs,
//! head checkpoints, run artifacts, and the drivers behind each subcommand.

pub mod checkpoint;
pub mod config;
pub mod drivers;
pub mod experiment;
pub mod report;
