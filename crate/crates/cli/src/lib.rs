//! Experiment harness around the core library: config resolution, run
//! directories, evaluation records, plot emission, and the subcommand
//! implementations behind the `streamgate` binary.

pub mod commands;
pub mod config;
pub mod evalrun;
pub mod plot;
pub mod rundir;
