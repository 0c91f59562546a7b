//! Causal-effect metrics.
//!
//! The log odds-ratio of one example compares the unmodified model's
//! preference for the base label with the intervened model's preference for
//! the source label:
//!
//! ```text
//! [log p(y_b|b) - log p(y_s|b)] + [log p*(y_s|b,s) - log p*(y_b|b,s)]
//! ```
//!
//! Per-site averages form an `L x R` grid; the overall odds of a grid is the
//! mean over layers of the best region at that layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervene::PreparedExample;
use crate::model::Model;
use crate::num::Real;
use crate::taskgen::EvalExample;
use crate::tokenizer::Tokenizer;

/// `orig` and `intv` are `(log p(y_b), log p(y_s))` pairs.
pub fn odds_ratio(orig: (f64, f64), intv: (f64, f64)) -> f64 {
    (orig.0 - orig.1) + (intv.1 - intv.0)
}

/// Arithmetic mean.
pub fn avg_odds(per_example: &[f64]) -> Result<f64> {
    if per_example.is_empty() {
        return Err(Error::Empty("odds-ratio list"));
    }
    Ok(per_example.iter().sum::<f64>() / per_example.len() as f64)
}

/// Average log odds-ratio per (layer, region), row-major by layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OddsGrid {
    values: Vec<f64>,
    n_layers: usize,
    regions: Vec<String>,
    pub n_eval: usize,
}

impl OddsGrid {
    pub fn new(rows: Vec<Vec<f64>>, regions: Vec<String>, n_eval: usize) -> Result<Self> {
        if rows.is_empty() || regions.is_empty() {
            return Err(Error::Empty("odds grid"));
        }
        let n_layers = rows.len();
        let mut values = Vec::with_capacity(n_layers * regions.len());
        for (l, row) in rows.into_iter().enumerate() {
            if row.len() != regions.len() {
                return Err(Error::DimensionMismatch {
                    expected: regions.len(),
                    actual: row.len(),
                });
            }
            if let Some(r) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("odds grid cell ({l}, {r})")));
            }
            values.extend(row);
        }
        Ok(Self {
            values,
            n_layers,
            regions,
            n_eval,
        })
    }

    /// Grid with numbered region labels.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.first().map_or(0, Vec::len);
        Self::new(rows, (0..r).map(|i| i.to_string()).collect(), 0)
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    pub fn get(&self, layer: usize, region: usize) -> f64 {
        self.values[layer * self.regions.len() + region]
    }

    pub fn row(&self, layer: usize) -> &[f64] {
        let r = self.regions.len();
        &self.values[layer * r..(layer + 1) * r]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_layers, self.regions.len())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                name: "odds grid".into(),
                expected: vec![self.n_layers, self.regions.len()],
                actual: vec![other.n_layers, other.regions.len()],
            });
        }
        Ok(Self {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            n_layers: self.n_layers,
            regions: self.regions.clone(),
            n_eval: self.n_eval,
        })
    }
}

/// Mean over layers of the maximum over regions.
pub fn overall_odds(grid: &OddsGrid) -> f64 {
    let total: f64 = (0..grid.n_layers())
        .map(|l| {
            grid.row(l)
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    total / grid.n_layers() as f64
}

/// Overall odds of `task - control`.
pub fn selectivity(task: &OddsGrid, control: &OddsGrid) -> Result<f64> {
    Ok(overall_odds(&task.zip_with(control, |a, b| a - b)?))
}

/// Fraction of `(log p(y_b), log p(y_s))` pairs that strictly prefer `y_b`.
pub fn accuracy_from_log_probs(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let correct = pairs.iter().filter(|(b, s)| b > s).count();
    Ok(correct as f64 / pairs.len() as f64)
}

/// Fraction of examples where the model assigns `y_b` strictly higher
/// probability than `y_s` given the base sentence. Ties count as wrong.
pub fn task_accuracy<F: Real>(
    model: &Model<F>,
    tok: &Tokenizer,
    evalset: &[EvalExample],
) -> Result<f64> {
    let pairs = evalset
        .iter()
        .map(|ex| {
            let p = PreparedExample::new(tok, ex)?;
            let lp = model.forward(&p.base_ids)?.log_probs;
            Ok((
                lp[p.base_label as usize].as_f64(),
                lp[p.source_label as usize].as_f64(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    accuracy_from_log_probs(&pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub task: String,
    pub method: String,
    pub checkpoint: String,
    pub overall_odds: f64,
    pub selectivity: f64,
    pub accuracy: f64,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_runs_have_zero_odds() {
        assert_eq!(odds_ratio((-0.3, -1.7), (-0.3, -1.7)), 0.0);
    }

    #[test]
    fn swapping_labels_negates() {
        let (o, i) = ((-0.5, -2.0), (-1.1, -0.4));
        assert_eq!(odds_ratio((o.1, o.0), (i.1, i.0)), -odds_ratio(o, i));
    }

    #[test]
    fn empty_average_is_an_error() {
        assert!(matches!(avg_odds(&[]), Err(Error::Empty(_))));
        assert_eq!(avg_odds(&[1.0, 3.0]).unwrap(), 2.0);
    }

    #[test]
    fn ragged_grid_is_rejected() {
        assert!(OddsGrid::from_rows(vec![vec![1.0, 2.0], vec![3.0]]).is_err());
        assert!(OddsGrid::from_rows(vec![vec![f64::NAN]]).is_err());
    }

    #[test]
    fn selectivity_hand_case() {
        let task = OddsGrid::from_rows(vec![vec![2.0, 1.0]]).unwrap();
        let control = OddsGrid::from_rows(vec![vec![1.0, 3.0]]).unwrap();
        assert_eq!(selectivity(&task, &control).unwrap(), 1.0);
        let other = OddsGrid::from_rows(vec![vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(
            selectivity(&task, &other),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
