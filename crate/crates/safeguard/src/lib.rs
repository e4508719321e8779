//! Simulation harness, file formats and command-line front end for the
//! backup-set safety filters in `safeguard-core`.

pub mod cli;
pub mod config;
pub mod formats;
pub mod plot;
pub mod sim;
