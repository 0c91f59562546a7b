//! CSV row types and readers.

use std::path::Path;

use featbench::metrics::OddsGrid;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{BenchError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRow {
    pub task: String,
    pub method: String,
    pub checkpoint: String,
    pub layer: usize,
    pub region: String,
    pub avg_odds: f64,
    pub control_avg_odds: f64,
    pub n_eval: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: String,
    pub method: String,
    pub checkpoint: String,
    pub overall_odds: f64,
    pub selectivity: f64,
    pub accuracy: f64,
}

/// A site, method or whole checkpoint that produced no result. Empty
/// fields mean the failure covers every value of that column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRow {
    pub checkpoint: String,
    pub task: String,
    pub method: String,
    pub layer: Option<usize>,
    pub region: String,
    pub error: String,
}

/// A task left out because its sentences or labels do not fit the
/// tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedRow {
    pub checkpoint: String,
    pub task: String,
    pub reason: String,
}

/// Writes `rows` with a header line, even when empty.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const SITE_HEADER: [&str; 9] = [
    "task",
    "method",
    "checkpoint",
    "layer",
    "region",
    "avg_odds",
    "control_avg_odds",
    "n_eval",
    "seed",
];
pub const SUMMARY_HEADER: [&str; 6] = [
    "task",
    "method",
    "checkpoint",
    "overall_odds",
    "selectivity",
    "accuracy",
];
pub const FAILURE_HEADER: [&str; 6] = ["checkpoint", "task", "method", "layer", "region", "error"];
pub const SKIPPED_HEADER: [&str; 3] = ["checkpoint", "task", "reason"];

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

/// Rebuilds the task odds grid of one `(task, method)` from site rows, with
/// layers and regions in order of first appearance. `checkpoint = None`
/// requires the rows to come from a single checkpoint.
pub fn grid_from_sites(
    rows: &[SiteRow],
    task: &str,
    method: &str,
    checkpoint: Option<&str>,
) -> Result<OddsGrid> {
    let picked: Vec<&SiteRow> = rows
        .iter()
        .filter(|r| r.task == task && r.method == method)
        .filter(|r| checkpoint.is_none_or(|c| r.checkpoint == c))
        .collect();
    let Some(first) = picked.first() else {
        return Err(BenchError::SiteTable(format!(
            "no rows for {task}/{method}"
        )));
    };
    if picked.iter().any(|r| r.checkpoint != first.checkpoint) {
        return Err(BenchError::SiteTable(
            "rows span several checkpoints; pick one".into(),
        ));
    }
    let mut layers: Vec<usize> = Vec::new();
    let mut regions: Vec<String> = Vec::new();
    for r in &picked {
        if !layers.contains(&r.layer) {
            layers.push(r.layer);
        }
        if !regions.contains(&r.region) {
            regions.push(r.region.clone());
        }
    }
    let mut cells: Vec<Vec<Option<f64>>> = vec![vec![None; regions.len()]; layers.len()];
    for r in &picked {
        let l = layers
            .iter()
            .position(|&x| x == r.layer)
            .expect("collected");
        let c = regions
            .iter()
            .position(|x| *x == r.region)
            .expect("collected");
        if cells[l][c].replace(r.avg_odds).is_some() {
            return Err(BenchError::SiteTable(format!(
                "duplicate row for layer {} region {}",
                r.layer, r.region
            )));
        }
    }
    let rows = cells
        .into_iter()
        .zip(&layers)
        .map(|(row, l)| {
            row.into_iter()
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| BenchError::SiteTable(format!("layer {l} is missing regions")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OddsGrid::new(rows, regions, first.n_eval)?)
}
