//! Event and frame fusion detection toolkit.

pub mod benchmark;
pub mod boxes;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod event;
pub mod fusion;
pub mod io;
pub mod labels;
pub mod pipeline;
pub mod seed;
pub mod synth;
pub mod tune;

pub use error::{Error, Result};
