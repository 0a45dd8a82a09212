//! File formats, data generation, training runs, and the voting service
//! built on `humanlike-core`.

pub mod arena;
pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod config;
pub mod datagen;
mod error;
pub mod experiment;
pub mod jsonl;
pub mod metrics;
pub mod report;

pub use config::Config;
pub use error::{Error, Result};
