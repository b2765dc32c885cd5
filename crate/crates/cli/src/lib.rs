//! Experiment harness for transition-matrix adversarial defenses: run
//! configuration, subcommands, and output records.

pub mod commands;
pub mod config;
pub mod records;

pub use commands::{run, Command, RunArgs};
