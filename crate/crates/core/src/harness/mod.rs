//! Operational surface: configuration, datasets, checkpoints, metrics,
//! architecture cards and the command line.

pub mod card;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod metrics;
