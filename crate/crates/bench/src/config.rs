//! Run configuration, read from TOML or assembled from CLI flags.
//!
//! ```toml
//! model_dir = "models/pythia-14m"
//! tasks = ["agr_sv_num_pp", "agr_gender"]
//! methods = ["das", "probe", "mean", "pca", "kmeans", "lda", "random", "vanilla"]
//! n_train_pairs = 200
//! n_eval_pairs = 50
//! seed = 0
//! data_seed = 0
//! probe_l2 = [10.0]
//! out_dir = "out"
//! jobs = 8
//!
//! [das]
//! learning_rate = 5e-3
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use featbench::featfind::{DasHyper, Method};
use featbench::taskgen::{bundled, load_task_spec, TaskTemplate};
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "model.safetensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding `config.json`, tokenizer files and, unless
    /// `checkpoints` is set, `model.safetensors`.
    pub model_dir: PathBuf,
    /// Weight files sharing the directory's config and tokenizer.
    pub checkpoints: Vec<PathBuf>,
    /// Bundled task names or paths to task spec files.
    pub tasks: Vec<String>,
    pub methods: Vec<Method>,
    pub n_train_pairs: usize,
    pub n_eval_pairs: usize,
    /// Seeds direction initialization, shuffling and clustering.
    pub seed: u64,
    /// Seeds dataset sampling, so method seeds can vary over a fixed dataset.
    pub data_seed: u64,
    pub das: DasHyper,
    /// Probe L2 weights on the summed log-loss; the best probe is reported.
    /// `None` picks the default for the model width.
    pub probe_l2: Option<Vec<f64>>,
    /// LDA ridge; `None` uses the trace-scaled default.
    pub lda_shrinkage: Option<f64>,
    pub out_dir: PathBuf,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model_dir: PathBuf::from("."),
            checkpoints: Vec::new(),
            tasks: bundled::names().map(str::to_owned).collect(),
            methods: Method::ALL.to_vec(),
            n_train_pairs: 200,
            n_eval_pairs: 50,
            seed: 0,
            data_seed: 0,
            das: DasHyper::default(),
            probe_l2: None,
            lda_shrinkage: None,
            out_dir: PathBuf::from("bench-out"),
            jobs: 1,
        }
    }
}

/// Probe L2 weights (summed log-loss convention) by residual width of the
/// pythia suite. Widths outside the suite get the smallest model's value.
pub fn default_probe_l2(d_model: usize) -> Vec<f64> {
    match d_model {
        256 => vec![100.0],
        512 => vec![1e3],
        768 | 1024 => vec![1e4, 1e5],
        2048 | 2560 => vec![1e5, 1e6],
        4096 => vec![1e6, 1e7],
        _ => vec![10.0],
    }
}

impl RunConfig {
    /// Reads a TOML config. Relative paths resolve against the file's
    /// directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| BenchError::ConfigParse {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.model_dir);
        resolve(&mut cfg.out_dir);
        cfg.checkpoints.iter_mut().for_each(resolve);
        for t in &mut cfg.tasks {
            if bundled::source(t).is_none() && Path::new(t).is_relative() {
                *t = base.join(&*t).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BenchError::Config(m));
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if self.tasks.is_empty() || self.methods.is_empty() {
            return bad("task and method lists must be nonempty".into());
        }
        let mut seen = HashSet::new();
        if let Some(m) = self.methods.iter().find(|m| !seen.insert(**m)) {
            return bad(format!("method `{m}` listed twice"));
        }
        let mut seen = HashSet::new();
        if let Some(t) = self.tasks.iter().find(|t| !seen.insert(t.as_str())) {
            return bad(format!("task `{t}` listed twice"));
        }
        if self.n_train_pairs == 0 || self.n_eval_pairs == 0 {
            return bad("pair counts must be at least 1".into());
        }
        if let Some(l2) = &self.probe_l2 {
            if l2.is_empty() || l2.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return bad(format!(
                    "probe_l2 must be nonempty and nonnegative, got {l2:?}"
                ));
            }
        }
        if let Some(eps) = self.lda_shrinkage {
            if !(eps.is_finite() && eps >= 0.0) {
                return bad(format!("lda_shrinkage must be nonnegative, got {eps}"));
            }
        }
        self.das.validate()?;
        let config = self.model_dir.join(CONFIG_FILE);
        if !config.is_file() {
            return bad(format!("missing model config {}", config.display()));
        }
        for ckpt in self.checkpoint_paths() {
            if !ckpt.is_file() {
                return bad(format!("missing checkpoint {}", ckpt.display()));
            }
        }
        for t in &self.tasks {
            load_task(t)?;
        }
        Ok(())
    }

    /// Weight files to evaluate, in order.
    pub fn checkpoint_paths(&self) -> Vec<PathBuf> {
        if self.checkpoints.is_empty() {
            vec![self.model_dir.join(WEIGHTS_FILE)]
        } else {
            self.checkpoints.clone()
        }
    }

    pub fn probe_l2_for(&self, d_model: usize) -> Vec<f64> {
        self.probe_l2
            .clone()
            .unwrap_or_else(|| default_probe_l2(d_model))
    }
}

/// A bundled task by name, or a task spec file.
pub fn load_task(name: &str) -> Result<TaskTemplate> {
    if let Some(t) = bundled::load(name) {
        return Ok(t?);
    }
    let text = std::fs::read_to_string(name).map_err(|_| BenchError::UnknownTask(name.into()))?;
    Ok(load_task_spec(&text)?)
}

/// Short name of a checkpoint: the file stem, or the parent directory for
/// a generic `model.safetensors`.
pub fn checkpoint_label(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if stem == "model" {
        if let Some(dir) = path.parent().and_then(Path::file_name) {
            return dir.to_string_lossy().into_owned();
        }
    }
    stem
}
