use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] featbench::Error),

    #[error("invalid run configuration: {0}")]
    Config(String),

    #[error("cannot parse config {path}: {message}")]
    ConfigParse { path: PathBuf, message: String },

    #[error("unknown task `{0}` (not bundled and not a readable spec file)")]
    UnknownTask(String),

    #[error("invalid heatmap: {0}")]
    Heatmap(String),

    #[error("site table: {0}")]
    SiteTable(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;
