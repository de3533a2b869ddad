//! Configuration, run orchestration and output files.

pub mod config;
pub mod csv;
pub mod run;
