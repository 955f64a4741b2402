//! File formats, the parallel benchmark runner and the `segbench` command line,
//! on top of [`segbench_core`].

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod log;
pub mod manifest;
pub mod runner;
pub mod segb;

pub use error::{Error, Result};
pub use segbench_core as core;
