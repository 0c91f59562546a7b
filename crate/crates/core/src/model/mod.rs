//! Frozen GPT-NeoX style decoder-only transformer.
//!
//! Pre-LayerNorm blocks with rotary attention over a fraction of each head
//! and a GeLU MLP, combined either in parallel (`x + attn(ln1 x) + mlp(ln2 x)`)
//! or sequentially. Weights use the Hugging Face GPT-NeoX tensor names, so a
//! `model.safetensors` exported from a pythia checkpoint loads directly:
//!
//! | tensor | shape |
//! |---|---|
//! | `gpt_neox.embed_in.weight` | `[vocab, d_model]` |
//! | `gpt_neox.layers.{i}.input_layernorm.{weight,bias}` | `[d_model]` |
//! | `gpt_neox.layers.{i}.post_attention_layernorm.{weight,bias}` | `[d_model]` |
//! | `gpt_neox.layers.{i}.attention.query_key_value.weight` | `[3 d_model, d_model]` |
//! | `gpt_neox.layers.{i}.attention.query_key_value.bias` | `[3 d_model]` |
//! | `gpt_neox.layers.{i}.attention.dense.{weight,bias}` | `[d_model, d_model]`, `[d_model]` |
//! | `gpt_neox.layers.{i}.mlp.dense_h_to_4h.{weight,bias}` | `[d_ff, d_model]`, `[d_ff]` |
//! | `gpt_neox.layers.{i}.mlp.dense_4h_to_h.{weight,bias}` | `[d_model, d_ff]`, `[d_model]` |
//! | `gpt_neox.final_layer_norm.{weight,bias}` | `[d_model]` |
//! | `embed_out.weight` (absent when embeddings are tied) | `[vocab, d_model]` |
//!
//! The fused QKV projection is laid out per head: rows
//! `[h*3*hd, h*3*hd+hd)` are head `h`'s queries, followed by its keys and
//! values.

mod backward;
mod forward;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{self, Tensor, TensorMap};
use crate::error::{Error, Result};
use crate::num::Real;

pub use forward::ForwardOutput;

fn default_rotary_base() -> f64 {
    10_000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(alias = "num_hidden_layers")]
    pub n_layers: usize,
    #[serde(alias = "hidden_size")]
    pub d_model: usize,
    #[serde(alias = "num_attention_heads")]
    pub n_heads: usize,
    #[serde(alias = "intermediate_size")]
    pub d_ff: usize,
    pub vocab_size: usize,
    #[serde(alias = "max_position_embeddings")]
    pub max_positions: usize,
    #[serde(alias = "rotary_pct")]
    pub rotary_fraction: f64,
    #[serde(alias = "use_parallel_residual")]
    pub parallel_residual: bool,
    #[serde(alias = "layer_norm_eps")]
    pub layernorm_epsilon: f64,
    #[serde(alias = "tie_word_embeddings", default)]
    pub tied_embeddings: bool,
    #[serde(alias = "rotary_emb_base", default = "default_rotary_base")]
    pub rotary_base: f64,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn rotary_dims(&self) -> usize {
        (self.head_dim() as f64 * self.rotary_fraction) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_layers == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.vocab_size == 0
            || self.max_positions == 0
        {
            return bad("all sizes must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(self.rotary_fraction > 0.0 && self.rotary_fraction <= 1.0) {
            return bad(format!(
                "rotary_fraction {} not in (0, 1]",
                self.rotary_fraction
            ));
        }
        let rot = self.rotary_dims();
        if rot == 0 || !rot.is_multiple_of(2) {
            return bad(format!(
                "rotary dims per head must be even and positive, got {rot}"
            ));
        }
        if !(self.layernorm_epsilon > 0.0) || !self.layernorm_epsilon.is_finite() {
            return bad("layernorm_epsilon must be positive".into());
        }
        if !(self.rotary_base > 0.0) {
            return bad("rotary_base must be positive".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm<F> {
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

/// Row-major `[n_out, n_in]` weight and bias.
#[derive(Debug, Clone)]
pub(crate) struct Linear<F> {
    pub weight: Vec<F>,
    pub bias: Vec<F>,
    pub n_in: usize,
    pub n_out: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Block<F> {
    pub ln1: LayerNorm<F>,
    pub ln2: LayerNorm<F>,
    pub qkv: Linear<F>,
    pub attn_out: Linear<F>,
    pub ff_in: Linear<F>,
    pub ff_out: Linear<F>,
}

/// Immutable transformer weights plus rotary tables.
#[derive(Debug, Clone)]
pub struct Model<F> {
    config: ModelConfig,
    embed: Vec<F>,
    blocks: Vec<Block<F>>,
    final_ln: LayerNorm<F>,
    /// `None` when the unembedding is tied to `embed`.
    unembed: Option<Vec<F>>,
    rope_cos: Vec<F>,
    rope_sin: Vec<F>,
}

/// Residual-stream location: the output of `layer` at token `position`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HookSite {
    pub layer: usize,
    pub position: usize,
}

impl HookSite {
    pub fn new(layer: usize, position: usize) -> Self {
        Self { layer, position }
    }
}

/// Residual stream after every layer, `n_layers x seq_len x d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCache<F> {
    n_layers: usize,
    seq_len: usize,
    d_model: usize,
    data: Vec<F>,
}

impl<F: Real> ResidualCache<F> {
    pub(crate) fn with_capacity(n_layers: usize, seq_len: usize, d_model: usize) -> Self {
        Self {
            n_layers,
            seq_len,
            d_model,
            data: Vec::with_capacity(n_layers * seq_len * d_model),
        }
    }

    pub(crate) fn push_layer(&mut self, x: &[F]) {
        debug_assert_eq!(x.len(), self.seq_len * self.d_model);
        self.data.extend_from_slice(x);
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// `seq_len x d_model` residual stream after `layer`.
    pub fn layer(&self, layer: usize) -> &[F] {
        let n = self.seq_len * self.d_model;
        &self.data[layer * n..(layer + 1) * n]
    }

    pub fn get(&self, layer: usize, position: usize) -> &[F] {
        let start = (layer * self.seq_len + position) * self.d_model;
        &self.data[start..start + self.d_model]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.n_layers, self.seq_len, self.d_model]
    }
}

fn layer_name(i: usize, rest: &str) -> String {
    format!("gpt_neox.layers.{i}.{rest}")
}

fn take<F: Real>(map: &TensorMap, name: &str, shape: &[usize]) -> Result<Vec<F>> {
    let t = map
        .get(name)
        .ok_or_else(|| Error::MissingTensor(name.to_owned()))?;
    if t.shape != shape {
        return Err(Error::ShapeMismatch {
            name: name.to_owned(),
            expected: shape.to_vec(),
            actual: t.shape.clone(),
        });
    }
    if t.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(name.to_owned()));
    }
    Ok(t.data.iter().map(|&x| F::lit(f64::from(x))).collect())
}

impl<F: Real> Model<F> {
    /// Builds a model from named tensors, checking presence, shape and
    /// finiteness of every tensor the architecture needs.
    pub fn from_tensors(config: ModelConfig, map: &TensorMap) -> Result<Self> {
        config.validate()?;
        let (d, ff, v) = (config.d_model, config.d_ff, config.vocab_size);

        let ln = |prefix: String| -> Result<LayerNorm<F>> {
            Ok(LayerNorm {
                weight: take(map, &format!("{prefix}.weight"), &[d])?,
                bias: take(map, &format!("{prefix}.bias"), &[d])?,
            })
        };
        let linear = |prefix: String, n_out: usize, n_in: usize| -> Result<Linear<F>> {
            Ok(Linear {
                weight: take(map, &format!("{prefix}.weight"), &[n_out, n_in])?,
                bias: take(map, &format!("{prefix}.bias"), &[n_out])?,
                n_in,
                n_out,
            })
        };

        let embed = take(map, "gpt_neox.embed_in.weight", &[v, d])?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            blocks.push(Block {
                ln1: ln(layer_name(i, "input_layernorm"))?,
                ln2: ln(layer_name(i, "post_attention_layernorm"))?,
                qkv: linear(layer_name(i, "attention.query_key_value"), 3 * d, d)?,
                attn_out: linear(layer_name(i, "attention.dense"), d, d)?,
                ff_in: linear(layer_name(i, "mlp.dense_h_to_4h"), ff, d)?,
                ff_out: linear(layer_name(i, "mlp.dense_4h_to_h"), d, ff)?,
            });
        }
        let final_ln = ln("gpt_neox.final_layer_norm".into())?;
        let unembed = if config.tied_embeddings {
            None
        } else {
            Some(take(map, "embed_out.weight", &[v, d])?)
        };
        let (rope_cos, rope_sin) = rope_tables(&config);
        Ok(Self {
            config,
            embed,
            blocks,
            final_ln,
            unembed,
            rope_cos,
            rope_sin,
        })
    }

    pub fn load_checkpoint(path: &Path, config: ModelConfig) -> Result<Self> {
        let map = container::read_file(path)?;
        Self::from_tensors(config, &map)
    }

    /// Named `f32` tensors in the checkpoint layout.
    pub fn to_tensors(&self) -> TensorMap {
        let c = &self.config;
        let f = |v: &[F]| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<f32>>();
        let mut m = TensorMap::new();
        m.insert(
            "gpt_neox.embed_in.weight".into(),
            Tensor::new(vec![c.vocab_size, c.d_model], f(&self.embed)),
        );
        let put_ln = |m: &mut TensorMap, prefix: String, ln: &LayerNorm<F>| {
            m.insert(format!("{prefix}.weight"), Tensor::vector(f(&ln.weight)));
            m.insert(format!("{prefix}.bias"), Tensor::vector(f(&ln.bias)));
        };
        let put_linear = |m: &mut TensorMap, prefix: String, lin: &Linear<F>| {
            m.insert(
                format!("{prefix}.weight"),
                Tensor::new(vec![lin.n_out, lin.n_in], f(&lin.weight)),
            );
            m.insert(format!("{prefix}.bias"), Tensor::vector(f(&lin.bias)));
        };
        for (i, b) in self.blocks.iter().enumerate() {
            put_ln(&mut m, layer_name(i, "input_layernorm"), &b.ln1);
            put_ln(&mut m, layer_name(i, "post_attention_layernorm"), &b.ln2);
            put_linear(&mut m, layer_name(i, "attention.query_key_value"), &b.qkv);
            put_linear(&mut m, layer_name(i, "attention.dense"), &b.attn_out);
            put_linear(&mut m, layer_name(i, "mlp.dense_h_to_4h"), &b.ff_in);
            put_linear(&mut m, layer_name(i, "mlp.dense_4h_to_h"), &b.ff_out);
        }
        put_ln(&mut m, "gpt_neox.final_layer_norm".into(), &self.final_ln);
        if let Some(u) = &self.unembed {
            m.insert(
                "embed_out.weight".into(),
                Tensor::new(vec![c.vocab_size, c.d_model], f(u)),
            );
        }
        m
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_tensors())
    }

    /// Same weights in another precision.
    pub fn cast<G: Real>(&self) -> Model<G> {
        Model::from_tensors(self.config.clone(), &self.to_tensors())
            .expect("tensors produced by a valid model")
    }

    /// Randomly initialized weights: Gaussian matrices with standard
    /// deviation `std`, LayerNorm gains near one and small biases.
    pub fn random(config: ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let small = Normal::new(0.0, 0.1 * std.max(1e-3))
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let (d, ff, v) = (config.d_model, config.d_ff, config.vocab_size);

        let mut map = TensorMap::new();
        let mut gauss = |shape: Vec<usize>, dist: &Normal<f64>, offset: f64| {
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| (offset + dist.sample(&mut rng)) as f32)
                .collect();
            Tensor::new(shape, data)
        };
        map.insert(
            "gpt_neox.embed_in.weight".into(),
            gauss(vec![v, d], &normal, 0.0),
        );
        for i in 0..config.n_layers {
            for ln in ["input_layernorm", "post_attention_layernorm"] {
                map.insert(
                    layer_name(i, &format!("{ln}.weight")),
                    gauss(vec![d], &small, 1.0),
                );
                map.insert(
                    layer_name(i, &format!("{ln}.bias")),
                    gauss(vec![d], &small, 0.0),
                );
            }
            for (name, n_out, n_in) in [
                ("attention.query_key_value", 3 * d, d),
                ("attention.dense", d, d),
                ("mlp.dense_h_to_4h", ff, d),
                ("mlp.dense_4h_to_h", d, ff),
            ] {
                map.insert(
                    layer_name(i, &format!("{name}.weight")),
                    gauss(vec![n_out, n_in], &normal, 0.0),
                );
                map.insert(
                    layer_name(i, &format!("{name}.bias")),
                    gauss(vec![n_out], &small, 0.0),
                );
            }
        }
        map.insert(
            "gpt_neox.final_layer_norm.weight".into(),
            gauss(vec![d], &small, 1.0),
        );
        map.insert(
            "gpt_neox.final_layer_norm.bias".into(),
            gauss(vec![d], &small, 0.0),
        );
        if !config.tied_embeddings {
            map.insert("embed_out.weight".into(), gauss(vec![v, d], &normal, 0.0));
        }
        Self::from_tensors(config, &map)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub(crate) fn unembedding(&self) -> &[F] {
        self.unembed.as_deref().unwrap_or(&self.embed)
    }

    pub(crate) fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() || ids.len() > self.config.max_positions {
            return Err(Error::SequenceLength {
                len: ids.len(),
                max: self.config.max_positions,
            });
        }
        if let Some(&id) = ids
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    pub(crate) fn check_site(&self, site: HookSite, seq_len: usize) -> Result<()> {
        if site.layer >= self.config.n_layers || site.position >= seq_len {
            return Err(Error::SiteOutOfRange {
                layer: site.layer,
                position: site.position,
                n_layers: self.config.n_layers,
                seq_len,
            });
        }
        Ok(())
    }
}

/// `cos`/`sin` of `pos * base^(-2i/rot)` for `i < rot/2`, `[max_positions, rot/2]`.
fn rope_tables<F: Real>(config: &ModelConfig) -> (Vec<F>, Vec<F>) {
    let rot = config.rotary_dims();
    let half = rot / 2;
    let mut cos = Vec::with_capacity(config.max_positions * half);
    let mut sin = Vec::with_capacity(config.max_positions * half);
    for pos in 0..config.max_positions {
        for i in 0..half {
            let inv_freq = 1.0 / config.rotary_base.powf((2 * i) as f64 / rot as f64);
            let angle = pos as f64 * inv_freq;
            cos.push(F::lit(angle.cos()));
            sin.push(F::lit(angle.sin()));
        }
    }
    (cos, sin)
}
