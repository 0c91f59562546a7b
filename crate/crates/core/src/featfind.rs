//! Feature-finding methods: each produces one unit direction per site.
//!
//! Supervised methods see residual activations of the training bases at one
//! site together with the class of the base label. DAS instead optimizes the
//! direction through the intervened model itself.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{self, Tensor, TensorMap};
use crate::error::{Error, Result};
use crate::intervene::{CachedExample, Direction};
use crate::model::Model;
use crate::num::{dot, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Das,
    Probe,
    Mean,
    Pca,
    Kmeans,
    Lda,
    Random,
    /// Full-vector interchange; needs no fitting.
    Vanilla,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Das,
        Method::Probe,
        Method::Mean,
        Method::Pca,
        Method::Kmeans,
        Method::Lda,
        Method::Random,
        Method::Vanilla,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Das => "das",
            Method::Probe => "probe",
            Method::Mean => "mean",
            Method::Pca => "pca",
            Method::Kmeans => "kmeans",
            Method::Lda => "lda",
            Method::Random => "random",
            Method::Vanilla => "vanilla",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

/// Activations at one site with binary classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
}

impl ActivationDataset {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<usize>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                actual: y.len(),
            });
        }
        let d = x
            .first()
            .map(Vec::len)
            .ok_or(Error::Empty("activation dataset"))?;
        for (i, row) in x.iter().enumerate() {
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("activation row {i}")));
            }
        }
        if let Some(&c) = y.iter().find(|&&c| c > 1) {
            return Err(Error::Degenerate(format!("class label {c} is not binary")));
        }
        if !y.contains(&0) || !y.contains(&1) {
            return Err(Error::Degenerate("both classes must be nonempty".into()));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x[0].len()
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.y[i] == class).collect()
    }

    fn class_mean(&self, class: usize) -> Vec<f64> {
        mean_of(
            self.class_indices(class).iter().map(|&i| &self.x[i]),
            self.dim(),
        )
    }
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a Vec<f64>>, d: usize) -> Vec<f64> {
    let mut sum = vec![0.0; d];
    let mut n = 0usize;
    for r in rows {
        for (s, v) in sum.iter_mut().zip(r) {
            *s += v;
        }
        n += 1;
    }
    sum.iter().map(|s| s / n as f64).collect()
}

/// Base activations at `(layer, region)` of cached training pairs, labelled
/// with `classes[i]`.
pub fn collect_activations<F: Real>(
    cached: &[CachedExample<F>],
    classes: &[usize],
    layer: usize,
    region: usize,
) -> Result<ActivationDataset> {
    let x = cached
        .iter()
        .map(|c| {
            let (h_b, _) = c.activations(layer, region)?;
            Ok(h_b.iter().map(|v| v.as_f64()).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    ActivationDataset::new(x, classes.to_vec())
}

/// `normalize(mu_0 - mu_1)`.
pub fn diff_means(acts: &ActivationDataset) -> Result<Direction> {
    let m0 = acts.class_mean(0);
    let m1 = acts.class_mean(1);
    Direction::new(m0.iter().zip(&m1).map(|(a, b)| a - b).collect())
}

/// Default LDA ridge: `1e-4 * trace(S) / d`.
pub fn default_lda_shrinkage(cov: &DMatrix<f64>) -> f64 {
    1e-4 * cov.trace() / cov.nrows() as f64
}

/// Pooled within-class covariance with denominator `n - 2`.
pub fn pooled_covariance(acts: &ActivationDataset) -> DMatrix<f64> {
    let d = acts.dim();
    let means = [acts.class_mean(0), acts.class_mean(1)];
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for (row, &c) in acts.x.iter().zip(&acts.y) {
        let centered = DVector::from_iterator(d, row.iter().zip(&means[c]).map(|(x, m)| x - m));
        cov.ger(1.0, &centered, &centered, 1.0);
    }
    cov / (acts.len().saturating_sub(2).max(1)) as f64
}

/// `normalize((S + eps I)^-1 (mu_0 - mu_1))`. `shrinkage = None` uses
/// [`default_lda_shrinkage`].
pub fn fit_lda(acts: &ActivationDataset, shrinkage: Option<f64>) -> Result<Direction> {
    let d = acts.dim();
    let mut cov = pooled_covariance(acts);
    let eps = shrinkage.unwrap_or_else(|| default_lda_shrinkage(&cov));
    for i in 0..d {
        cov[(i, i)] += eps;
    }
    let eig = SymmetricEigen::new(cov.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || min <= 1e-10 * max {
        return Err(Error::Singular(format!(
            "regularized covariance eigenvalues in [{min:e}, {max:e}]"
        )));
    }
    let m0 = acts.class_mean(0);
    let m1 = acts.class_mean(1);
    let diff = DVector::from_iterator(d, m0.iter().zip(&m1).map(|(a, b)| a - b));
    let sol = cov
        .lu()
        .solve(&diff)
        .ok_or_else(|| Error::Singular("LU solve failed".into()))?;
    Direction::new(sol.iter().copied().collect())
}

/// Flips `v` so that its largest-magnitude coordinate is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Top principal direction of all rows pooled and mean-centered.
pub fn fit_pca(acts: &ActivationDataset) -> Result<Direction> {
    let (n, d) = (acts.len(), acts.dim());
    let mu = mean_of(acts.x.iter(), d);
    let centered = DMatrix::from_fn(n, d, |i, j| acts.x[i][j] - mu[j]);
    let svd = centered.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Degenerate("SVD did not converge".into()))?;
    let (top, &sigma) = svd
        .singular_values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .ok_or_else(|| Error::Degenerate("no singular values".into()))?;
    if !(sigma > 0.0) {
        return Err(Error::Degenerate("all rows are identical".into()));
    }
    let mut v: Vec<f64> = v_t.row(top).iter().copied().collect();
    fix_sign(&mut v);
    Direction::new(v)
}

/// Result of 2-means clustering. `centroids[0]` is the lexicographically
/// larger centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: [Vec<f64>; 2],
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITERS: usize = 1000;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn lloyd(x: &[Vec<f64>], mut centers: [Vec<f64>; 2]) -> KMeansFit {
    let d = x[0].len();
    let mut assign: Vec<usize> = vec![usize::MAX; x.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        let next: Vec<usize> = x
            .iter()
            .map(|r| usize::from(sq_dist(r, &centers[1]) < sq_dist(r, &centers[0])))
            .collect();
        if next == assign {
            break;
        }
        assign = next;
        for (k, center) in centers.iter_mut().enumerate() {
            if assign.contains(&k) {
                *center = mean_of(
                    x.iter()
                        .zip(&assign)
                        .filter(|(_, &a)| a == k)
                        .map(|(r, _)| r),
                    d,
                );
            }
        }
    }
    let inertia = x
        .iter()
        .zip(&assign)
        .map(|(r, &k)| sq_dist(r, &centers[k]))
        .sum();
    KMeansFit {
        centroids: centers,
        assignments: assign,
        inertia,
    }
}

fn kmeans_pp<R: Rng>(x: &[Vec<f64>], rng: &mut R) -> [Vec<f64>; 2] {
    let first = x[rng.random_range(0..x.len())].clone();
    let weights: Vec<f64> = x.iter().map(|r| sq_dist(r, &first)).collect();
    let total: f64 = weights.iter().sum();
    let mut t = rng.random::<f64>() * total;
    let mut pick = x.len() - 1;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 && t < *w {
            pick = i;
            break;
        }
        t -= w;
    }
    if weights[pick] == 0.0 {
        pick = weights
            .iter()
            .rposition(|&w| w > 0.0)
            .expect("at least two distinct rows");
    }
    [first, x[pick].clone()]
}

/// 2-means with k-means++ seeding and best-of-10 restarts.
pub fn kmeans(x: &[Vec<f64>], seed: u64) -> Result<KMeansFit> {
    let Some(first) = x.first() else {
        return Err(Error::Degenerate("no rows".into()));
    };
    if x.iter().all(|r| r == first) {
        return Err(Error::Degenerate("fewer than two distinct rows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..KMEANS_RESTARTS {
        let fit = lloyd(x, kmeans_pp(x, &mut rng));
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    let mut fit = best.expect("at least one restart");
    let lex = fit.centroids[0]
        .iter()
        .zip(&fit.centroids[1])
        .map(|(a, b)| a.total_cmp(b))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal);
    if lex.is_lt() {
        fit.centroids.swap(0, 1);
        fit.assignments.iter_mut().for_each(|a| *a = 1 - *a);
    }
    Ok(fit)
}

/// `normalize(c_0 - c_1)` for the 2-means centroids, larger centroid first.
pub fn fit_kmeans(acts: &ActivationDataset, seed: u64) -> Result<Direction> {
    let fit = kmeans(&acts.x, seed)?;
    let [c0, c1] = &fit.centroids;
    Direction::new(c0.iter().zip(c1).map(|(a, b)| a - b).collect())
}

/// Isotropic Gaussian sample, normalized.
pub fn random_direction(d: usize, seed: u64) -> Direction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(dir) = Direction::new(v) {
            return dir;
        }
    }
}

/// Logistic-regression fit. `weights` and `bias` are the raw parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFit {
    pub direction: Direction,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub converged: bool,
    pub iterations: usize,
}

pub const PROBE_GRAD_TOL: f64 = 1e-6;
pub const PROBE_MAX_ITERS: usize = 20_000;

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct ProbeObjective<'a> {
    acts: &'a ActivationDataset,
    targets: Vec<f64>,
    l2: f64,
    fit_bias: bool,
}

impl ProbeObjective<'_> {
    /// Mean log-loss plus `l2/2 |w|^2`; `theta` is `[w, b]`.
    fn value(&self, theta: &[f64]) -> f64 {
        let d = self.acts.dim();
        let (w, b) = (&theta[..d], theta[d]);
        let loss: f64 = self
            .acts
            .x
            .iter()
            .zip(&self.targets)
            .map(|(x, &t)| {
                let z = dot(w, x) + b;
                softplus(z) - t * z
            })
            .sum::<f64>()
            / self.acts.len() as f64;
        loss + 0.5 * self.l2 * dot(w, w)
    }

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let d = self.acts.dim();
        let n = self.acts.len() as f64;
        let (w, b) = (&theta[..d], theta[d]);
        let mut g = vec![0.0; d + 1];
        for (x, &t) in self.acts.x.iter().zip(&self.targets) {
            let r = sigmoid(dot(w, x) + b) - t;
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi += r * xi;
            }
            g[d] += r;
        }
        for j in 0..d {
            g[j] = g[j] / n + self.l2 * w[j];
        }
        g[d] = if self.fit_bias { g[d] / n } else { 0.0 };
        g
    }
}

/// L2-regularized logistic regression predicting class 0, minimizing the
/// mean log-loss plus `l2/2 |w|^2` (the bias is not penalized). Solved by
/// full-batch gradient descent with Barzilai-Borwein steps and Armijo
/// backtracking until the gradient norm drops below [`PROBE_GRAD_TOL`].
pub fn fit_probe(acts: &ActivationDataset, l2: f64, fit_bias: bool) -> Result<ProbeFit> {
    if !(l2 >= 0.0) || !l2.is_finite() {
        return Err(Error::Degenerate(format!("invalid L2 weight {l2}")));
    }
    let d = acts.dim();
    let obj = ProbeObjective {
        acts,
        targets: acts
            .y
            .iter()
            .map(|&c| if c == 0 { 1.0 } else { 0.0 })
            .collect(),
        l2,
        fit_bias,
    };
    let mut theta = vec![0.0; d + 1];
    let mut f = obj.value(&theta);
    let mut g = obj.gradient(&theta);
    let mut step = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < PROBE_MAX_ITERS {
        let gnorm = dot(&g, &g).sqrt();
        if gnorm < PROBE_GRAD_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let mut t = step;
        let (next, f_next) = loop {
            let cand: Vec<f64> = theta.iter().zip(&g).map(|(p, gi)| p - t * gi).collect();
            let fc = obj.value(&cand);
            if fc <= f - 1e-4 * t * gnorm * gnorm || t < 1e-20 {
                break (cand, fc);
            }
            t *= 0.5;
        };
        let g_next = obj.gradient(&next);
        let s: Vec<f64> = next.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_next.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        step = if sy > 0.0 {
            (dot(&s, &s) / sy).clamp(1e-12, 1e12)
        } else {
            t * 2.0
        };
        if f_next >= f && dot(&s, &s) == 0.0 {
            break;
        }
        theta = next;
        f = f_next;
        g = g_next;
    }
    if !converged {
        log::warn!("probe did not converge after {iterations} iterations");
    }
    let weights = theta[..d].to_vec();
    let direction = Direction::new(weights.clone())?;
    Ok(ProbeFit {
        direction,
        weights,
        bias: theta[d],
        converged,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DasHyper {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for DasHyper {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            batch_size: 4,
            epochs: 1,
            warmup_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl DasHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.warmup_fraction)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "invalid DAS hyperparameters {self:?}"
            )))
        }
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size) * self.epochs
    }

    pub fn warmup_steps(&self, total: usize) -> usize {
        (total as f64 * self.warmup_fraction) as usize
    }
}

/// Learning-rate multiplier at optimizer step `step` (0-based): linear
/// warmup from 0 over `warmup` steps, then linear decay to 0 at `total`.
pub fn lr_factor(step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        step as f64 / warmup as f64
    } else {
        (total.saturating_sub(step)) as f64 / (total - warmup).max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DasOutcome {
    pub direction: Direction,
    /// Mean minibatch loss at each optimizer step, before the update.
    pub losses: Vec<f64>,
}

/// Trains a direction so that interchanging along it at `(layer, region)`
/// makes the model predict each pair's target token (the source label,
/// `prepared.source_label`). Adam with linear warmup and decay; the
/// direction is renormalized after every step.
pub fn train_das<F: Real>(
    model: &Model<F>,
    train: &[CachedExample<F>],
    layer: usize,
    region: usize,
    hyper: &DasHyper,
    seed: u64,
) -> Result<DasOutcome> {
    hyper.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("DAS training set"));
    }
    let d = model.d_model();
    let mut dir = random_direction(d, seed);
    let mut a = dir.as_slice().to_vec();
    let total = hyper.total_steps(train.len());
    let warmup = hyper.warmup_steps(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let mut m = vec![0.0; d];
    let mut v = vec![0.0; d];
    let mut losses = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            let mut loss = 0.0;
            let mut grad = vec![0.0; d];
            for &i in batch {
                let ex = &train[i];
                let (_, h_s) = ex.activations(layer, region)?;
                let (site_b, _) = ex.prepared.sites(layer, region)?;
                let (l, g) = model.direction_grad_cached(
                    &ex.base.cache,
                    site_b,
                    h_s,
                    &a,
                    ex.prepared.source_label,
                )?;
                loss += l;
                for (acc, gi) in grad.iter_mut().zip(&g) {
                    *acc += gi;
                }
            }
            let k = batch.len() as f64;
            loss /= k;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { step });
            }
            losses.push(loss);

            let t = (step + 1) as i32;
            let lr = hyper.learning_rate * lr_factor(step, total, warmup);
            let bc1 = 1.0 - hyper.beta1.powi(t);
            let bc2 = 1.0 - hyper.beta2.powi(t);
            for j in 0..d {
                let gj = grad[j] / k;
                m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * gj;
                v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gj * gj;
                a[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + hyper.adam_eps);
            }
            dir = Direction::new(a)?;
            a = dir.as_slice().to_vec();
            step += 1;
        }
    }
    Ok(DasOutcome {
        direction: dir,
        losses,
    })
}

/// Container name of a stored direction.
pub fn direction_key(task: &str, layer: usize, region: &str, method: &str) -> String {
    format!("{task}/{layer}/{region}/{method}")
}

/// Writes directions as `f32` vectors keyed by [`direction_key`].
pub fn save_directions(path: &Path, directions: &BTreeMap<String, Direction>) -> Result<()> {
    let map: TensorMap = directions
        .iter()
        .map(|(k, dir)| {
            let data = dir.as_slice().iter().map(|&x| x as f32).collect();
            (k.clone(), Tensor::vector(data))
        })
        .collect();
    container::write_file(path, &map)
}

/// Reads directions written by [`save_directions`], renormalizing each.
pub fn load_directions(path: &Path) -> Result<BTreeMap<String, Direction>> {
    container::read_file(path)?
        .into_iter()
        .map(|(k, t)| {
            let v = t.data.iter().map(|&x| f64::from(x)).collect();
            Ok((k, Direction::new(v)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(x: &[&[f64]], y: &[usize]) -> ActivationDataset {
        ActivationDataset::new(x.iter().map(|r| r.to_vec()).collect(), y.to_vec()).unwrap()
    }

    #[test]
    fn diff_means_hand_case() {
        let a = ds(
            &[&[1.0, 0.0], &[3.0, 0.0], &[0.0, 2.0], &[0.0, 4.0]],
            &[0, 0, 1, 1],
        );
        let dir = diff_means(&a).unwrap();
        let n = 13f64.sqrt();
        assert!((dir.as_slice()[0] - 2.0 / n).abs() < 1e-15);
        assert!((dir.as_slice()[1] + 3.0 / n).abs() < 1e-15);
    }

    #[test]
    fn identical_classes_give_zero_vector() {
        let a = ds(&[&[1.0, 2.0], &[1.0, 2.0]], &[0, 1]);
        assert!(matches!(diff_means(&a), Err(Error::ZeroVector)));
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(ActivationDataset::new(vec![vec![1.0], vec![2.0]], vec![0, 0]).is_err());
    }

    #[test]
    fn lda_diagonal_hand_case() {
        // Same offsets around (2,4) and the origin; pooled covariance is
        // proportional to diag(1, 4).
        let o = [[1.0, 0.0], [-1.0, 0.0], [0.0, 2.0], [0.0, -2.0]];
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (c, mu) in [(0, [2.0, 4.0]), (1, [0.0, 0.0])] {
            for off in &o {
                x.push(vec![mu[0] + off[0], mu[1] + off[1]]);
                y.push(c);
            }
        }
        let acts = ActivationDataset::new(x, y).unwrap();
        let cov = pooled_covariance(&acts);
        assert!(
            (cov[(0, 0)] - 4.0 / 6.0).abs() < 1e-12 && (cov[(1, 1)] - 16.0 / 6.0).abs() < 1e-12
        );
        let dir = fit_lda(&acts, Some(0.0)).unwrap();
        let n = 5f64.sqrt();
        assert!((dir.as_slice()[0] - 2.0 / n).abs() < 1e-12);
        assert!((dir.as_slice()[1] - 1.0 / n).abs() < 1e-12);
    }

    #[test]
    fn lda_rank_deficient_without_shrinkage_is_singular() {
        let a = ds(
            &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[2.0, 1.0, 0.0]],
            &[0, 0, 1],
        );
        assert!(matches!(fit_lda(&a, Some(0.0)), Err(Error::Singular(_))));
        assert!(fit_lda(&a, None).is_ok());
    }

    #[test]
    fn pca_sign_is_fixed() {
        let a = ds(&[&[-1.0, 0.0], &[1.0, 0.0]], &[0, 1]);
        assert_eq!(fit_pca(&a).unwrap().as_slice(), &[1.0, 0.0]);
        let same = ds(&[&[3.0, 3.0], &[3.0, 3.0]], &[0, 1]);
        assert!(matches!(fit_pca(&same), Err(Error::Degenerate(_))));
    }

    #[test]
    fn kmeans_one_dimensional_clusters() {
        let x: Vec<Vec<f64>> = [0.9, 1.1, -0.9, -1.1].iter().map(|&v| vec![v]).collect();
        let fit = kmeans(&x, 3).unwrap();
        assert!((fit.centroids[0][0] - 1.0).abs() < 1e-12);
        assert!((fit.centroids[1][0] + 1.0).abs() < 1e-12);
        let acts = ActivationDataset::new(x, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(fit_kmeans(&acts, 3).unwrap().as_slice(), &[1.0]);
        assert!(kmeans(&[vec![1.0], vec![1.0]], 0).is_err());
    }

    #[test]
    fn random_direction_in_one_dimension_is_a_sign() {
        for seed in 0..20 {
            assert_eq!(random_direction(1, seed).as_slice()[0].abs(), 1.0);
        }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        assert_eq!(lr_factor(0, 100, 10), 0.0);
        assert_eq!(lr_factor(5, 100, 10), 0.5);
        assert_eq!(lr_factor(10, 100, 10), 1.0);
        assert_eq!(lr_factor(55, 100, 10), 0.5);
        assert_eq!(lr_factor(100, 100, 10), 0.0);
        let h = DasHyper::default();
        assert_eq!(h.total_steps(400), 100);
        assert_eq!(h.warmup_steps(100), 10);
    }

    #[test]
    fn methods_roundtrip_through_names() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("svm".parse::<Method>().is_err());
    }

    #[test]
    fn directions_roundtrip_through_container() {
        let mut dirs = BTreeMap::new();
        dirs.insert(
            direction_key("t", 1, "np", "mean"),
            Direction::new(vec![3.0, 4.0]).unwrap(),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dirs.safetensors");
        save_directions(&path, &dirs).unwrap();
        let back = load_directions(&path).unwrap();
        assert_eq!(back.keys().collect::<Vec<_>>(), vec!["t/1/np/mean"]);
        assert!((back["t/1/np/mean"].as_slice()[0] - 0.6).abs() < 1e-7);
    }
}
