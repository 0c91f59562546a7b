//! Templated minimal-pair tasks.
//!
//! A task spec is a JSON document describing an ordered list of regions.
//! Exactly one region is the *label variable*: its options are grouped by
//! type, and the type decides which next-token label the sentence should
//! elicit. Counterfactual pairs share every other region.
//!
//! ```json
//! {
//!   "name": "agr_sv_num_pp",
//!   "types": ["sing", "plur"],
//!   "regions": [
//!     {"name": "det", "kind": "constant", "text": "The"},
//!     {"name": "np_subj", "kind": "label_variable",
//!      "options": {"sing": ["author"], "plur": ["authors"]}},
//!     {"name": "prep", "kind": "variable", "options": ["near", "behind"]}
//!   ],
//!   "label_options": {"sing": [" is"], "plur": [" are"]},
//!   "control_labels": [" dog", " give"]
//! }
//! ```
//!
//! Leading spaces in labels are significant. Regions after the first are
//! joined with a single space.

use std::collections::{BTreeMap, HashSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CONTROL_LABELS: [&str; 2] = [" dog", " give"];

/// Resample budget per requested eval pair before giving up.
const RESAMPLES_PER_EVAL_PAIR: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Constant,
    Variable,
    LabelVariable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionContent {
    Constant(String),
    Variable(Vec<String>),
    /// Options keyed by type.
    LabelVariable(BTreeMap<String, Vec<String>>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub name: String,
    pub content: RegionContent,
}

impl RegionSpec {
    pub fn kind(&self) -> RegionKind {
        match self.content {
            RegionContent::Constant(_) => RegionKind::Constant,
            RegionContent::Variable(_) => RegionKind::Variable,
            RegionContent::LabelVariable(_) => RegionKind::LabelVariable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub name: String,
    pub regions: Vec<RegionSpec>,
    /// Ordered; the first type defines class 0 of the binary partition.
    pub types: Vec<String>,
    pub label_options: BTreeMap<String, Vec<String>>,
    pub control_labels: [String; 2],
}

impl TaskTemplate {
    pub fn region_names(&self) -> Vec<&str> {
        self.regions.iter().map(|r| r.name.as_str()).collect()
    }

    pub fn region_index(&self, name: &str) -> Option<usize> {
        self.regions.iter().position(|r| r.name == name)
    }

    pub fn label_region_index(&self) -> usize {
        self.regions
            .iter()
            .position(|r| r.kind() == RegionKind::LabelVariable)
            .expect("validated template has a label_variable region")
    }

    /// Binary class of a type: 0 for the first declared type, 1 otherwise.
    pub fn class_of(&self, ty: &str) -> usize {
        usize::from(self.types.first().map(String::as_str) != Some(ty))
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    name: String,
    types: Vec<String>,
    regions: Vec<RawRegion>,
    label_options: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    control_labels: Option<Vec<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegion {
    name: String,
    kind: RegionKind,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    options: Option<RawOptions>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawOptions {
    Flat(Vec<String>),
    Typed(BTreeMap<String, Vec<String>>),
}

fn parse_err(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::TaskParse {
        path: path.into(),
        message: message.into(),
    }
}

/// Parses and validates a task spec document.
pub fn load_task_spec(text: &str) -> Result<TaskTemplate> {
    let raw: RawTask = serde_json::from_str(text).map_err(|e| {
        parse_err(
            format!("line {} column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;

    let mut seen = HashSet::new();
    let mut regions = Vec::with_capacity(raw.regions.len());
    for (i, r) in raw.regions.into_iter().enumerate() {
        let path = format!("regions[{i}]");
        if r.name.is_empty() {
            return Err(parse_err(format!("{path}.name"), "empty region name"));
        }
        if !seen.insert(r.name.clone()) {
            return Err(parse_err(
                format!("{path}.name"),
                format!("duplicate region name `{}`", r.name),
            ));
        }
        let content = match (r.kind, r.text, r.options) {
            (RegionKind::Constant, Some(text), None) => RegionContent::Constant(text),
            (RegionKind::Constant, _, _) => {
                return Err(parse_err(
                    path,
                    "constant region needs `text` and no `options`",
                ))
            }
            (RegionKind::Variable, None, Some(RawOptions::Flat(opts))) => {
                RegionContent::Variable(opts)
            }
            (RegionKind::Variable, _, _) => {
                return Err(parse_err(
                    format!("{path}.options"),
                    "variable region needs a flat `options` list and no `text`",
                ))
            }
            (RegionKind::LabelVariable, None, Some(RawOptions::Typed(opts))) => {
                RegionContent::LabelVariable(opts)
            }
            (RegionKind::LabelVariable, _, _) => {
                return Err(parse_err(
                    format!("{path}.options"),
                    "label_variable region needs `options` keyed by type and no `text`",
                ))
            }
        };
        regions.push(RegionSpec {
            name: r.name,
            content,
        });
    }

    let control_labels = match raw.control_labels {
        None => DEFAULT_CONTROL_LABELS.map(str::to_owned),
        Some(v) => <[String; 2]>::try_from(v)
            .map_err(|_| parse_err("control_labels", "expected exactly two labels"))?,
    };

    let template = TaskTemplate {
        name: raw.name,
        regions,
        types: raw.types,
        label_options: raw.label_options,
        control_labels,
    };
    validate(&template)?;
    Ok(template)
}

pub fn validate(t: &TaskTemplate) -> Result<()> {
    let fail = |rule: String| Error::TaskInvariant {
        task: t.name.clone(),
        rule,
    };

    let label_regions: Vec<&RegionSpec> = t
        .regions
        .iter()
        .filter(|r| r.kind() == RegionKind::LabelVariable)
        .collect();
    if label_regions.len() != 1 {
        return Err(fail(format!(
            "exactly one label_variable region required, found {}",
            label_regions.len()
        )));
    }
    let RegionContent::LabelVariable(label_opts) = &label_regions[0].content else {
        unreachable!()
    };

    let type_set: HashSet<&str> = t.types.iter().map(String::as_str).collect();
    if type_set.len() != t.types.len() {
        return Err(fail("duplicate type identifiers".into()));
    }
    if t.types.len() < 2 || label_opts.len() < 2 {
        return Err(fail("need ≥2 types".into()));
    }

    for ty in label_opts.keys() {
        if !type_set.contains(ty.as_str()) {
            return Err(fail(format!(
                "label_variable region `{}` uses undeclared type `{ty}`",
                label_regions[0].name
            )));
        }
    }
    for ty in t.label_options.keys() {
        if !type_set.contains(ty.as_str()) {
            return Err(fail(format!("label_options uses undeclared type `{ty}`")));
        }
    }
    for ty in &t.types {
        match label_opts.get(ty) {
            Some(v) if !v.is_empty() => {}
            _ => {
                return Err(fail(format!(
                    "type `{ty}` has no option in label_variable region"
                )))
            }
        }
        match t.label_options.get(ty) {
            Some(v) if !v.is_empty() => {}
            _ => return Err(fail(format!("type `{ty}` has no entry in label_options"))),
        }
    }
    if t.label_options
        .values()
        .flatten()
        .chain(t.control_labels.iter())
        .any(String::is_empty)
    {
        return Err(fail("label strings must be nonempty".into()));
    }

    for r in &t.regions {
        match &r.content {
            RegionContent::Constant(text) if text.trim().is_empty() => {
                return Err(fail(format!("constant region `{}` has empty text", r.name)))
            }
            RegionContent::Variable(opts) if opts.is_empty() => {
                return Err(fail(format!("variable region `{}` has no options", r.name)))
            }
            RegionContent::Variable(opts) if opts.iter().any(|o| o.trim().is_empty()) => {
                return Err(fail(format!(
                    "variable region `{}` has an empty option",
                    r.name
                )))
            }
            RegionContent::LabelVariable(opts)
                if opts.values().flatten().any(|o| o.trim().is_empty()) =>
            {
                return Err(fail(format!(
                    "label_variable region `{}` has an empty option",
                    r.name
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// One counterfactual pair `<b, s, y_b, y_s>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EvalExample {
    pub base: String,
    pub source: String,
    pub base_label: String,
    pub source_label: String,
    pub base_regions: Vec<String>,
    pub source_regions: Vec<String>,
    pub base_type: String,
    pub source_type: String,
    /// Binary class of `base_type` (0 iff it is the template's first type).
    pub base_class: usize,
    pub source_class: usize,
}

impl EvalExample {
    /// Swaps the roles of base and source.
    pub fn mirror(&self) -> Self {
        Self {
            base: self.source.clone(),
            source: self.base.clone(),
            base_label: self.source_label.clone(),
            source_label: self.base_label.clone(),
            base_regions: self.source_regions.clone(),
            source_regions: self.base_regions.clone(),
            base_type: self.source_type.clone(),
            source_type: self.base_type.clone(),
            base_class: self.source_class,
            source_class: self.base_class,
        }
    }
}

/// Joins region texts with single spaces.
pub fn join_regions<S: AsRef<str>>(regions: &[S]) -> String {
    let mut out = String::new();
    for (i, r) in regions.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(r.as_ref());
    }
    out
}

/// Samples a counterfactual pair: two distinct types, a label-variable option
/// per type, and one shared option for every other variable region.
pub fn sample_pair<R: Rng + ?Sized>(template: &TaskTemplate, rng: &mut R) -> EvalExample {
    let n_types = template.types.len();
    let i1 = rng.random_range(0..n_types);
    let mut i2 = rng.random_range(0..n_types - 1);
    if i2 >= i1 {
        i2 += 1;
    }
    let t1 = &template.types[i1];
    let t2 = &template.types[i2];

    let mut base_regions = Vec::with_capacity(template.regions.len());
    let mut source_regions = Vec::with_capacity(template.regions.len());
    for region in &template.regions {
        match &region.content {
            RegionContent::Constant(text) => {
                base_regions.push(text.clone());
                source_regions.push(text.clone());
            }
            RegionContent::Variable(opts) => {
                let pick = opts.choose(rng).expect("validated: nonempty").clone();
                base_regions.push(pick.clone());
                source_regions.push(pick);
            }
            RegionContent::LabelVariable(opts) => {
                base_regions.push(opts[t1].choose(rng).expect("validated").clone());
                source_regions.push(opts[t2].choose(rng).expect("validated").clone());
            }
        }
    }
    let base_label = template.label_options[t1]
        .choose(rng)
        .expect("validated")
        .clone();
    let source_label = template.label_options[t2]
        .choose(rng)
        .expect("validated")
        .clone();

    EvalExample {
        base: join_regions(&base_regions),
        source: join_regions(&source_regions),
        base_label,
        source_label,
        base_regions,
        source_regions,
        base_type: t1.clone(),
        source_type: t2.clone(),
        base_class: template.class_of(t1),
        source_class: template.class_of(t2),
    }
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub task: String,
    pub train: Vec<EvalExample>,
    pub eval: Vec<EvalExample>,
    pub seed: u64,
}

/// Samples `n_train_pairs` pairs (plus mirrors) for training and
/// `n_eval_pairs` pairs (plus mirrors) for evaluation. Eval pairs whose base
/// or source sentence occurs as a training base are resampled.
pub fn build_dataset(
    template: &TaskTemplate,
    n_train_pairs: usize,
    n_eval_pairs: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_train_pairs == 0 || n_eval_pairs == 0 {
        return Err(Error::Empty("dataset pair counts must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut train = Vec::with_capacity(2 * n_train_pairs);
    for _ in 0..n_train_pairs {
        let e = sample_pair(template, &mut rng);
        let m = e.mirror();
        train.push(e);
        train.push(m);
    }

    // Mirroring makes the set of train bases equal to the set of train
    // sentences, so checking both eval sentences keeps mirrored eval disjoint.
    let train_bases: HashSet<&str> = train.iter().map(|e| e.base.as_str()).collect();
    let max_attempts = RESAMPLES_PER_EVAL_PAIR * n_eval_pairs;
    let mut eval = Vec::with_capacity(2 * n_eval_pairs);
    let mut attempts = 0;
    while eval.len() < 2 * n_eval_pairs {
        if attempts >= max_attempts {
            return Err(Error::Exhausted {
                task: template.name.clone(),
                attempts,
            });
        }
        attempts += 1;
        let e = sample_pair(template, &mut rng);
        if train_bases.contains(e.base.as_str()) || train_bases.contains(e.source.as_str()) {
            continue;
        }
        let m = e.mirror();
        eval.push(e);
        eval.push(m);
    }

    Ok(Dataset {
        task: template.name.clone(),
        train,
        eval,
        seed,
    })
}

/// Replaces every label with the template's control label for its class.
/// Inputs and the class partition are untouched.
pub fn apply_control_remap(dataset: &Dataset, template: &TaskTemplate) -> Dataset {
    let remap = |e: &EvalExample| {
        let mut out = e.clone();
        out.base_label = template.control_labels[e.base_class].clone();
        out.source_label = template.control_labels[e.source_class].clone();
        out
    };
    Dataset {
        task: dataset.task.clone(),
        train: dataset.train.iter().map(remap).collect(),
        eval: dataset.eval.iter().map(remap).collect(),
        seed: dataset.seed,
    }
}

// ---------------------------------------------------------------------------
// Bundled task specs
// ---------------------------------------------------------------------------

pub mod bundled {
    use super::{load_task_spec, TaskTemplate};
    use crate::error::Result;

    const SPECS: &[(&str, &str)] = &[
        ("agr_gender", include_str!("../data/tasks/agr_gender.json")),
        (
            "agr_sv_num_pp",
            include_str!("../data/tasks/agr_sv_num_pp.json"),
        ),
        (
            "npi_any_subj-relc",
            include_str!("../data/tasks/npi_any_subj-relc.json"),
        ),
        (
            "filler_gap_subj",
            include_str!("../data/tasks/filler_gap_subj.json"),
        ),
        (
            "garden_npz_obj",
            include_str!("../data/tasks/garden_npz_obj.json"),
        ),
        ("gss_subord", include_str!("../data/tasks/gss_subord.json")),
    ];

    pub fn names() -> impl Iterator<Item = &'static str> {
        SPECS.iter().map(|(n, _)| *n)
    }

    pub fn source(name: &str) -> Option<&'static str> {
        SPECS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
    }

    pub fn load(name: &str) -> Option<Result<TaskTemplate>> {
        source(name).map(load_task_spec)
    }
}
