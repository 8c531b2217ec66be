//! Command-line harness: run configuration, dataset generation/loading,
//! training orchestration, evaluation, and metric/plot emission.

pub mod commands;
pub mod config;
pub mod datasets;
pub mod plot;
pub mod trainer;
