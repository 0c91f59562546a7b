//! Benchmark orchestration on top of `featbench`: run configuration, the
//! per-site evaluation sweep, CSV reports, SVG heatmaps and fixture model
//! directories.

pub mod config;
pub mod error;
pub mod fixture;
pub mod heatmap;
pub mod report;
pub mod runner;

pub use config::RunConfig;
pub use error::{BenchError, Result};
pub use runner::{checkpoint_sweep, evaluate_task, run_benchmark, RunReport, TaskReport};
