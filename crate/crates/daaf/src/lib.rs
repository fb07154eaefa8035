//! Files, experiments and the command line around `daaf-core`.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod experiments;
pub mod pnm;
pub mod train;
pub mod viz;
