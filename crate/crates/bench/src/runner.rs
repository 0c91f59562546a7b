//! The benchmark sweep.
//!
//! For each task the train and eval pairs are run through the model once and
//! cached. Every `(method, layer, region)` cell then fits its direction on
//! the training activations and averages the log odds-ratio over the eval
//! pairs, once with the task labels and once with the control labels. Cells
//! run on a worker pool and are reduced in a fixed order, so outputs do not
//! depend on the number of workers.

use std::collections::BTreeMap;
use std::path::Path;

use featbench::featfind::{
    collect_activations, diff_means, direction_key, fit_kmeans, fit_lda, fit_pca, fit_probe,
    random_direction, save_directions, train_das, ActivationDataset, Method,
};
use featbench::intervene::{CachedExample, Direction, InterventionKind, PreparedExample};
use featbench::metrics::{
    accuracy_from_log_probs, avg_odds, odds_ratio, overall_odds, selectivity, OddsGrid,
};
use featbench::model::{Model, ModelConfig};
use featbench::taskgen::{apply_control_remap, build_dataset, TaskTemplate};
use featbench::tokenizer::{label_token_id, Tokenizer};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{checkpoint_label, load_task, RunConfig, CONFIG_FILE};
use crate::error::{BenchError, Result};
use crate::heatmap::{emit_heatmap, HeatmapSpec};
use crate::report::{
    write_csv, FailureRow, SiteRow, SkippedRow, SummaryRow, FAILURE_HEADER, SITE_HEADER,
    SKIPPED_HEADER, SUMMARY_HEADER,
};

/// Per-cell seed: the first eight bytes of
/// `sha256(seed | task | method | layer | region)`, little-endian.
pub fn cell_seed(seed: u64, task: &str, method: Method, layer: usize, region: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for part in [task, method.name(), &layer.to_string(), region] {
        h.update([0u8]);
        h.update(part.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
}

/// Knobs shared by every cell of a run.
#[derive(Debug, Clone)]
pub struct CellSettings {
    pub das: featbench::featfind::DasHyper,
    /// Summed-log-loss convention, divided by the train size when fitting.
    pub probe_l2: Vec<f64>,
    pub lda_shrinkage: Option<f64>,
    pub seed: u64,
}

/// Cached train and eval pairs of one task under task and control labels.
pub struct TaskData {
    pub template: TaskTemplate,
    pub train: Vec<CachedExample<f32>>,
    pub eval: Vec<CachedExample<f32>>,
    pub train_control: Vec<CachedExample<f32>>,
    pub eval_control: Vec<CachedExample<f32>>,
    pub classes: Vec<usize>,
    /// Base region texts of the first eval pair, for axis labels.
    pub region_examples: Vec<String>,
}

fn relabel(
    cached: &[CachedExample<f32>],
    remapped: &[featbench::taskgen::EvalExample],
    tok: &Tokenizer,
) -> Result<Vec<CachedExample<f32>>> {
    cached
        .iter()
        .zip(remapped)
        .map(|(c, e)| {
            let mut out = c.clone();
            out.prepared.base_label = label_token_id(tok, &e.base_label)?;
            out.prepared.source_label = label_token_id(tok, &e.source_label)?;
            Ok(out)
        })
        .collect()
}

impl TaskData {
    /// Samples the dataset, tokenizes and aligns every pair, and caches both
    /// forward passes. Errors here mean the task does not fit the tokenizer
    /// or model.
    pub fn prepare(
        model: &Model<f32>,
        tok: &Tokenizer,
        template: TaskTemplate,
        n_train_pairs: usize,
        n_eval_pairs: usize,
        seed: u64,
    ) -> Result<Self> {
        let dataset = build_dataset(&template, n_train_pairs, n_eval_pairs, seed)?;
        let control = apply_control_remap(&dataset, &template);
        let cache = |examples: &[featbench::taskgen::EvalExample]| {
            examples
                .par_iter()
                .map(|e| {
                    let p = PreparedExample::new(tok, e)?;
                    Ok(CachedExample::new(model, p)?)
                })
                .collect::<Result<Vec<_>>>()
        };
        let train = cache(&dataset.train)?;
        let eval = cache(&dataset.eval)?;
        let train_control = relabel(&train, &control.train, tok)?;
        let eval_control = relabel(&eval, &control.eval, tok)?;
        Ok(Self {
            classes: dataset.train.iter().map(|e| e.base_class).collect(),
            region_examples: dataset.eval[0].base_regions.clone(),
            template,
            train,
            eval,
            train_control,
            eval_control,
        })
    }

    pub fn accuracy(&self) -> Result<f64> {
        let pairs: Vec<(f64, f64)> = self.eval.iter().map(CachedExample::original).collect();
        Ok(accuracy_from_log_probs(&pairs)?)
    }
}

/// Mean log odds-ratio of `kind` at a site over `examples`.
pub fn site_odds(
    model: &Model<f32>,
    examples: &[CachedExample<f32>],
    layer: usize,
    region: usize,
    kind: &InterventionKind,
) -> Result<f64> {
    let odds = examples
        .iter()
        .map(|ex| {
            Ok(odds_ratio(
                ex.original(),
                ex.intervene(model, layer, region, kind)?,
            ))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(avg_odds(&odds)?)
}

/// Outcome of one direction at one site.
#[derive(Debug, Clone, PartialEq)]
pub struct CellValue {
    pub avg_odds: f64,
    pub control_avg_odds: f64,
    pub direction: Option<Direction>,
}

fn fit_direction(
    method: Method,
    acts: &ActivationDataset,
    settings: &CellSettings,
    seed: u64,
) -> Result<Direction> {
    Ok(match method {
        Method::Mean => diff_means(acts)?,
        Method::Pca => fit_pca(acts)?,
        Method::Kmeans => fit_kmeans(acts, seed)?,
        Method::Lda => fit_lda(acts, settings.lda_shrinkage)?,
        Method::Random => random_direction(acts.dim(), seed),
        Method::Das | Method::Probe | Method::Vanilla => {
            unreachable!("handled by evaluate_cell")
        }
    })
}

/// Evaluates one cell. Returns one value per probe L2 weight for the
/// probe and a single value otherwise.
pub fn evaluate_cell(
    model: &Model<f32>,
    data: &TaskData,
    method: Method,
    layer: usize,
    region: usize,
    settings: &CellSettings,
    seed: u64,
) -> Result<Vec<CellValue>> {
    let score = |dir: Option<Direction>, control_dir: Option<Direction>| -> Result<CellValue> {
        let kind = dir
            .clone()
            .map_or(InterventionKind::Vanilla, InterventionKind::Dii);
        let control_kind = control_dir.map_or(kind.clone(), InterventionKind::Dii);
        Ok(CellValue {
            avg_odds: site_odds(model, &data.eval, layer, region, &kind)?,
            control_avg_odds: site_odds(model, &data.eval_control, layer, region, &control_kind)?,
            direction: dir,
        })
    };
    match method {
        Method::Vanilla => Ok(vec![score(None, None)?]),
        Method::Das => {
            let task = train_das(model, &data.train, layer, region, &settings.das, seed)?;
            let control = train_das(
                model,
                &data.train_control,
                layer,
                region,
                &settings.das,
                seed,
            )?;
            Ok(vec![score(Some(task.direction), Some(control.direction))?])
        }
        Method::Probe => {
            let acts = collect_activations(&data.train, &data.classes, layer, region)?;
            let n = acts.len() as f64;
            settings
                .probe_l2
                .iter()
                .map(|&l2| match fit_probe(&acts, l2 / n, true) {
                    Ok(fit) => score(Some(fit.direction), None),
                    Err(e) => inert_or(e.into(), data, layer, region),
                })
                .collect()
        }
        _ => {
            let acts = collect_activations(&data.train, &data.classes, layer, region)?;
            match fit_direction(method, &acts, settings, seed) {
                Ok(dir) => Ok(vec![score(Some(dir), None)?]),
                Err(e) => Ok(vec![inert_or(e, data, layer, region)?]),
            }
        }
    }
}

/// A fit that fails on constant activations scores 0 at an inert site and
/// propagates the error anywhere else.
fn inert_or(e: BenchError, data: &TaskData, layer: usize, region: usize) -> Result<CellValue> {
    use featbench::Error;
    let degenerate = matches!(
        e,
        BenchError::Core(Error::ZeroVector | Error::Degenerate(_) | Error::Singular(_))
    );
    if degenerate && inert_site(data, layer, region)? {
        Ok(CellValue {
            avg_odds: 0.0,
            control_avg_odds: 0.0,
            direction: None,
        })
    } else {
        Err(e)
    }
}

/// True when base and source activations coincide at the site for every
/// pair, so any interchange there is the identity and every odds-ratio is 0.
fn inert_site(data: &TaskData, layer: usize, region: usize) -> Result<bool> {
    for ex in data.train.iter().chain(&data.eval) {
        let (h_b, h_s) = ex.activations(layer, region)?;
        if h_b != h_s {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Grids and directions of one method on one task.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: Method,
    pub task_grid: OddsGrid,
    pub control_grid: OddsGrid,
    /// Row-major by layer.
    pub seeds: Vec<u64>,
    pub directions: Vec<Option<Direction>>,
    /// The probe L2 weight whose grid was kept.
    pub probe_l2: Option<f64>,
}

impl MethodResult {
    pub fn overall_odds(&self) -> f64 {
        overall_odds(&self.task_grid)
    }

    pub fn selectivity(&self) -> Result<f64> {
        Ok(selectivity(&self.task_grid, &self.control_grid)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub method: Method,
    pub layer: usize,
    pub region: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskReport {
    pub task: String,
    pub regions: Vec<String>,
    pub region_examples: Vec<String>,
    pub accuracy: f64,
    pub n_eval: usize,
    /// Methods whose every cell succeeded, in request order.
    pub methods: Vec<MethodResult>,
    pub failures: Vec<CellFailure>,
}

impl TaskReport {
    pub fn method(&self, m: Method) -> Option<&MethodResult> {
        self.methods.iter().find(|r| r.method == m)
    }
}

/// Runs every `(method, layer, region)` cell of a prepared task on the
/// current rayon pool and reduces in request order.
pub fn evaluate_task(
    model: &Model<f32>,
    data: &TaskData,
    methods: &[Method],
    settings: &CellSettings,
) -> Result<TaskReport> {
    let task = data.template.name.clone();
    let regions: Vec<String> = data
        .template
        .region_names()
        .iter()
        .map(|s| s.to_string())
        .collect();
    let (n_layers, n_regions) = (model.n_layers(), regions.len());
    let cells: Vec<(Method, usize, usize)> = methods
        .iter()
        .flat_map(|&m| (0..n_layers).flat_map(move |l| (0..n_regions).map(move |r| (m, l, r))))
        .collect();
    let outcomes: Vec<(u64, Result<Vec<CellValue>>)> = cells
        .par_iter()
        .map(|&(m, l, r)| {
            let seed = cell_seed(settings.seed, &task, m, l, &regions[r]);
            (seed, evaluate_cell(model, data, m, l, r, settings, seed))
        })
        .collect();

    let mut results = Vec::new();
    let mut failures = Vec::new();
    let per_method = n_layers * n_regions;
    for (i, &m) in methods.iter().enumerate() {
        let block = &outcomes[i * per_method..(i + 1) * per_method];
        let mut values: Vec<&Vec<CellValue>> = Vec::with_capacity(per_method);
        for (k, (_, out)) in block.iter().enumerate() {
            match out {
                Ok(v) => values.push(v),
                Err(e) => failures.push(CellFailure {
                    method: m,
                    layer: k / n_regions,
                    region: regions[k % n_regions].clone(),
                    error: e.to_string(),
                }),
            }
        }
        if values.len() < per_method {
            log::warn!("{task}/{m}: {} failed cells", per_method - values.len());
            continue;
        }
        let variants = values[0].len();
        let grid = |v: usize, f: fn(&CellValue) -> f64| -> Result<OddsGrid> {
            let rows = (0..n_layers)
                .map(|l| {
                    (0..n_regions)
                        .map(|r| f(&values[l * n_regions + r][v]))
                        .collect()
                })
                .collect();
            Ok(OddsGrid::new(rows, regions.clone(), data.eval.len())?)
        };
        // Several probe weights: keep the one with the best overall odds.
        let mut best = 0;
        let mut best_grid = grid(0, |c| c.avg_odds)?;
        for v in 1..variants {
            let g = grid(v, |c| c.avg_odds)?;
            if overall_odds(&g) > overall_odds(&best_grid) {
                best = v;
                best_grid = g;
            }
        }
        results.push(MethodResult {
            method: m,
            control_grid: grid(best, |c| c.control_avg_odds)?,
            task_grid: best_grid,
            seeds: block.iter().map(|(s, _)| *s).collect(),
            directions: values.iter().map(|v| v[best].direction.clone()).collect(),
            probe_l2: (m == Method::Probe).then(|| settings.probe_l2[best]),
        });
    }
    Ok(TaskReport {
        task,
        regions,
        region_examples: data.region_examples.clone(),
        accuracy: data.accuracy()?,
        n_eval: data.eval.len(),
        methods: results,
        failures,
    })
}

/// Everything a run produced, in deterministic order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub sites: Vec<SiteRow>,
    pub summary: Vec<SummaryRow>,
    pub failures: Vec<FailureRow>,
    pub skipped: Vec<SkippedRow>,
}

impl RunReport {
    pub fn failed(&self) -> bool {
        !self.failures.is_empty()
    }

    fn extend(&mut self, other: RunReport) {
        self.sites.extend(other.sites);
        self.summary.extend(other.summary);
        self.failures.extend(other.failures);
        self.skipped.extend(other.skipped);
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_csv(&dir.join("sites.csv"), &self.sites, &SITE_HEADER)?;
        write_csv(&dir.join("summary.csv"), &self.summary, &SUMMARY_HEADER)?;
        write_csv(&dir.join("failures.csv"), &self.failures, &FAILURE_HEADER)?;
        write_csv(&dir.join("skipped.csv"), &self.skipped, &SKIPPED_HEADER)?;
        Ok(())
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| BenchError::Config(format!("cannot start {jobs} workers: {e}")))
}

/// Evaluates one weight file and writes its reports, heatmaps and
/// directions under `out`.
pub fn run_checkpoint(
    cfg: &RunConfig,
    weights: &Path,
    label: &str,
    out: &Path,
) -> Result<RunReport> {
    let model_cfg = ModelConfig::from_file(&cfg.model_dir.join(CONFIG_FILE))?;
    let model = Model::<f32>::load_checkpoint(weights, model_cfg)?;
    let tok = Tokenizer::from_dir(&cfg.model_dir)?;
    let settings = CellSettings {
        das: cfg.das.clone(),
        probe_l2: cfg.probe_l2_for(model.d_model()),
        lda_shrinkage: cfg.lda_shrinkage,
        seed: cfg.seed,
    };
    let mut report = RunReport::default();
    let mut directions = BTreeMap::new();
    std::fs::create_dir_all(out.join("heatmaps"))?;
    for name in &cfg.tasks {
        let template = load_task(name)?;
        let task = template.name.clone();
        let data = match TaskData::prepare(
            &model,
            &tok,
            template,
            cfg.n_train_pairs,
            cfg.n_eval_pairs,
            cfg.data_seed,
        ) {
            Ok(d) => d,
            Err(e) => {
                log::warn!("skipping task {task} on {label}: {e}");
                report.skipped.push(SkippedRow {
                    checkpoint: label.into(),
                    task,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let tr = evaluate_task(&model, &data, &cfg.methods, &settings)?;
        for f in &tr.failures {
            report.failures.push(FailureRow {
                checkpoint: label.into(),
                task: task.clone(),
                method: f.method.to_string(),
                layer: Some(f.layer),
                region: f.region.clone(),
                error: f.error.clone(),
            });
        }
        for mr in &tr.methods {
            let n_regions = tr.regions.len();
            for l in 0..mr.task_grid.n_layers() {
                for (r, region) in tr.regions.iter().enumerate() {
                    report.sites.push(SiteRow {
                        task: task.clone(),
                        method: mr.method.to_string(),
                        checkpoint: label.into(),
                        layer: l,
                        region: region.clone(),
                        avg_odds: mr.task_grid.get(l, r),
                        control_avg_odds: mr.control_grid.get(l, r),
                        n_eval: tr.n_eval,
                        seed: mr.seeds[l * n_regions + r],
                    });
                    if let Some(dir) = &mr.directions[l * n_regions + r] {
                        directions.insert(
                            direction_key(&task, l, region, mr.method.name()),
                            dir.clone(),
                        );
                    }
                }
            }
            report.summary.push(SummaryRow {
                task: task.clone(),
                method: mr.method.to_string(),
                checkpoint: label.into(),
                overall_odds: mr.overall_odds(),
                selectivity: mr.selectivity()?,
                accuracy: tr.accuracy,
            });
            let x_labels = tr
                .regions
                .iter()
                .zip(&tr.region_examples)
                .map(|(name, text)| format!("{name}: {text}"))
                .collect();
            let grid = mr.task_grid.clone();
            let (lo, hi) = grid.min_max();
            let y_labels = (0..grid.n_layers()).map(|l| l.to_string()).collect();
            let spec = HeatmapSpec::new(
                grid,
                (lo.min(0.0), hi.max(0.0)),
                x_labels,
                y_labels,
                format!("{task} / {} / {label}", mr.method),
            )?;
            emit_heatmap(
                &spec,
                &out.join("heatmaps")
                    .join(format!("{task}_{}.svg", mr.method)),
            )?;
        }
    }
    report.write(out)?;
    save_directions(&out.join("directions.safetensors"), &directions)?;
    Ok(report)
}

/// Runs the configured benchmark. With a checkpoint list this is
/// [`checkpoint_sweep`]; otherwise the directory's `model.safetensors` is
/// evaluated and reports land directly in `out_dir`.
pub fn run_benchmark(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    if !cfg.checkpoints.is_empty() {
        return checkpoint_sweep(cfg);
    }
    let weights = &cfg.checkpoint_paths()[0];
    let label = checkpoint_label(weights);
    pool(cfg.jobs)?.install(|| run_checkpoint(cfg, weights, &label, &cfg.out_dir))
}

/// Runs every checkpoint into its own subdirectory and writes combined
/// reports with a checkpoint column at the top level. A checkpoint that
/// cannot be loaded or evaluated is recorded as a failure and the sweep
/// continues.
pub fn checkpoint_sweep(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let paths = cfg.checkpoint_paths();
    let labels: Vec<String> = paths.iter().map(|p| checkpoint_label(p)).collect();
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            return Err(BenchError::Config(format!(
                "two checkpoints share the label `{l}`"
            )));
        }
    }
    let pool = pool(cfg.jobs)?;
    let mut combined = RunReport::default();
    for (path, label) in paths.iter().zip(&labels) {
        let out = cfg.out_dir.join(label);
        match pool.install(|| run_checkpoint(cfg, path, label, &out)) {
            Ok(r) => combined.extend(r),
            Err(e) => {
                log::error!("checkpoint {label} failed: {e}");
                combined.failures.push(FailureRow {
                    checkpoint: label.clone(),
                    task: String::new(),
                    method: String::new(),
                    layer: None,
                    region: String::new(),
                    error: e.to_string(),
                });
            }
        }
    }
    combined.write(&cfg.out_dir)?;
    Ok(combined)
}
