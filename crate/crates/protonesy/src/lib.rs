//! File formats, run configuration and the command-line surface around
//! `protonesy-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod idx;
pub mod output;
pub mod taskspec;
