//! Interchange interventions on the residual stream.
//!
//! A one-dimensional distributed interchange along a unit direction `a`
//! replaces the base activation `h_b` by
//!
//! ```text
//! f* = h_b + ((h_s . a) - (h_b . a)) a
//! ```
//!
//! so only the component along `a` is taken from the source activation
//! `h_s`. The vanilla interchange replaces the whole vector.

use crate::error::{Error, Result};
use crate::model::{ForwardOutput, HookSite, Model};
use crate::num::{norm, Real};
use crate::taskgen::EvalExample;
use crate::tokenizer::{align_regions, label_token_id, RegionAlignment, Tokenizer};

/// Unit-norm direction in the residual stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction(Vec<f64>);

impl Direction {
    /// Normalizes `v` to unit length.
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let n = norm(&v);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroVector);
        }
        Ok(Self(v.into_iter().map(|x| x / n).collect()))
    }

    /// Standard basis vector `e_i` in `d` dimensions.
    pub fn basis(d: usize, i: usize) -> Self {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InterventionKind {
    Dii(Direction),
    Vanilla,
}

impl InterventionKind {
    /// The vector written into the base run at the intervention site.
    pub fn replacement<F: Real>(&self, h_b: &[F], h_s: &[F]) -> Result<Vec<F>> {
        match self {
            InterventionKind::Dii(a) => dii_apply(h_b, h_s, a),
            InterventionKind::Vanilla => {
                if h_b.len() != h_s.len() {
                    return Err(Error::DimensionMismatch {
                        expected: h_b.len(),
                        actual: h_s.len(),
                    });
                }
                Ok(h_s.to_vec())
            }
        }
    }
}

/// `h_b + ((h_s . a) - (h_b . a)) a`, computed in `f64`.
pub fn dii_apply<F: Real>(h_b: &[F], h_s: &[F], a: &Direction) -> Result<Vec<F>> {
    for v in [h_s.len(), a.dim()] {
        if v != h_b.len() {
            return Err(Error::DimensionMismatch {
                expected: h_b.len(),
                actual: v,
            });
        }
    }
    let a = a.as_slice();
    let swap = h_s
        .iter()
        .zip(h_b)
        .zip(a)
        .map(|((s, b), ai)| (s.as_f64() - b.as_f64()) * ai)
        .sum::<f64>();
    Ok(h_b
        .iter()
        .zip(a)
        .map(|(&b, &ai)| F::lit(b.as_f64() + swap * ai))
        .collect())
}

/// A pair tokenized and aligned for one model vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedExample {
    pub base_ids: Vec<u32>,
    pub source_ids: Vec<u32>,
    pub alignment: RegionAlignment,
    pub base_label: u32,
    pub source_label: u32,
}

impl PreparedExample {
    pub fn new(tok: &Tokenizer, example: &EvalExample) -> Result<Self> {
        let alignment = align_regions(tok, example)?;
        Ok(Self {
            base_ids: tok.encode(&example.base)?,
            source_ids: tok.encode(&example.source)?,
            alignment,
            base_label: label_token_id(tok, &example.base_label)?,
            source_label: label_token_id(tok, &example.source_label)?,
        })
    }

    /// Base-side and source-side hook sites for a region at `layer`.
    pub fn sites(&self, layer: usize, region: usize) -> Result<(HookSite, HookSite)> {
        let al = &self.alignment;
        if region >= al.n_regions() {
            return Err(Error::UnknownRegion(format!(
                "#{region} (pair has {} regions)",
                al.n_regions()
            )));
        }
        Ok((
            HookSite::new(layer, al.base_last[region]),
            HookSite::new(layer, al.source_last[region]),
        ))
    }
}

fn label_pair<F: Real>(log_probs: &[F], ex: &PreparedExample) -> (f64, f64) {
    (
        log_probs[ex.base_label as usize].as_f64(),
        log_probs[ex.source_label as usize].as_f64(),
    )
}

/// `(log p(y_b), log p(y_s))` at the final base position when the residual
/// at the region's last token after `layer` is replaced according to `kind`.
pub fn run_intervened<F: Real>(
    model: &Model<F>,
    example: &PreparedExample,
    layer: usize,
    region: usize,
    kind: &InterventionKind,
) -> Result<(f64, f64)> {
    let (site_b, site_s) = example.sites(layer, region)?;
    let source = model.forward(&example.source_ids)?;
    model.check_site(site_s, example.source_ids.len())?;
    let base = model.forward(&example.base_ids)?;
    model.check_site(site_b, example.base_ids.len())?;
    let replacement = kind.replacement(
        base.cache.get(site_b.layer, site_b.position),
        source.cache.get(site_s.layer, site_s.position),
    )?;
    let lp = model.forward_intervened(&example.base_ids, site_b, &replacement)?;
    Ok(label_pair(&lp, example))
}

/// A prepared pair with both plain forward passes cached, so many
/// interventions can be evaluated by resuming from the site.
#[derive(Debug, Clone)]
pub struct CachedExample<F> {
    pub prepared: PreparedExample,
    pub base: ForwardOutput<F>,
    pub source: ForwardOutput<F>,
}

impl<F: Real> CachedExample<F> {
    pub fn new(model: &Model<F>, prepared: PreparedExample) -> Result<Self> {
        let base = model.forward(&prepared.base_ids)?;
        let source = model.forward(&prepared.source_ids)?;
        Ok(Self {
            prepared,
            base,
            source,
        })
    }

    /// `(log p(y_b), log p(y_s))` under the unmodified model on the base.
    pub fn original(&self) -> (f64, f64) {
        label_pair(&self.base.log_probs, &self.prepared)
    }

    /// Base and source activations at a site.
    pub fn activations(&self, layer: usize, region: usize) -> Result<(&[F], &[F])> {
        let (site_b, site_s) = self.prepared.sites(layer, region)?;
        let n = self.base.cache.n_layers();
        for (site, len) in [
            (site_b, self.base.cache.seq_len()),
            (site_s, self.source.cache.seq_len()),
        ] {
            if site.layer >= n || site.position >= len {
                return Err(Error::SiteOutOfRange {
                    layer: site.layer,
                    position: site.position,
                    n_layers: n,
                    seq_len: len,
                });
            }
        }
        Ok((
            self.base.cache.get(site_b.layer, site_b.position),
            self.source.cache.get(site_s.layer, site_s.position),
        ))
    }

    /// Same result as [`run_intervened`], resuming from the cached base run.
    pub fn intervene(
        &self,
        model: &Model<F>,
        layer: usize,
        region: usize,
        kind: &InterventionKind,
    ) -> Result<(f64, f64)> {
        let (h_b, h_s) = self.activations(layer, region)?;
        let replacement = kind.replacement(h_b, h_s)?;
        let (site_b, _) = self.prepared.sites(layer, region)?;
        let lp = model.resume(&self.base.cache, site_b, &replacement)?;
        Ok(label_pair(&lp, &self.prepared))
    }
}
