//! Forward passes, optionally recording what the backward pass needs.

use super::{Block, HookSite, LayerNorm, Linear, Model, ResidualCache};
use crate::error::{Error, Result};
use crate::num::{dot, log_softmax, Real};

/// Log-probabilities of the next token after the final position, and the
/// residual stream after every layer.
#[derive(Debug, Clone)]
pub struct ForwardOutput<F> {
    pub log_probs: Vec<F>,
    pub cache: ResidualCache<F>,
}

#[derive(Debug, Clone)]
pub(crate) struct LnTrace<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockTrace<F> {
    pub ln1: LnTrace<F>,
    pub ln2: LnTrace<F>,
    /// Post-rotary queries and keys, `seq x d_model`, head-major per row.
    pub q: Vec<F>,
    pub k: Vec<F>,
    pub v: Vec<F>,
    /// `n_heads x seq x seq`, zero above the diagonal.
    pub probs: Vec<F>,
    /// MLP pre-activations, `seq x d_ff`.
    pub pre_act: Vec<F>,
}

#[derive(Debug, Clone)]
pub(crate) struct HeadTrace<F> {
    pub ln: LnTrace<F>,
    pub log_probs: Vec<F>,
}

pub(crate) fn layer_norm<F: Real>(
    ln: &LayerNorm<F>,
    x: &[F],
    d: usize,
    eps: f64,
) -> (Vec<F>, LnTrace<F>) {
    let rows = x.len() / d;
    let mut out = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|v| {
                let c = v.as_f64() - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let rs = F::lit(1.0 / (var + eps).sqrt());
        let m = F::lit(mean);
        for j in 0..d {
            let h = (row[j] - m) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * ln.weight[j] + ln.bias[j];
        }
        rstd.push(rs);
    }
    (out, LnTrace { xhat, rstd })
}

/// `y = x W^T + b` over every row of `x`.
pub(crate) fn linear_rows<F: Real>(lin: &Linear<F>, x: &[F]) -> Vec<F> {
    let rows = x.len() / lin.n_in;
    let mut y = Vec::with_capacity(rows * lin.n_out);
    for r in 0..rows {
        let xr = &x[r * lin.n_in..(r + 1) * lin.n_in];
        for o in 0..lin.n_out {
            let w = &lin.weight[o * lin.n_in..(o + 1) * lin.n_in];
            y.push(F::lit(dot(w, xr)) + lin.bias[o]);
        }
    }
    y
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

impl<F: Real> Model<F> {
    /// Rotates the first `rot` dims of a head vector at `pos` in place.
    pub(crate) fn rope(&self, v: &mut [F], pos: usize) {
        let half = self.config.rotary_dims() / 2;
        let cos = &self.rope_cos[pos * half..(pos + 1) * half];
        let sin = &self.rope_sin[pos * half..(pos + 1) * half];
        for i in 0..half {
            let (a, b) = (v[i], v[i + half]);
            v[i] = a * cos[i] - b * sin[i];
            v[i + half] = b * cos[i] + a * sin[i];
        }
    }

    /// Transpose of [`Self::rope`].
    pub(crate) fn rope_transpose(&self, v: &mut [F], pos: usize) {
        let half = self.config.rotary_dims() / 2;
        let cos = &self.rope_cos[pos * half..(pos + 1) * half];
        let sin = &self.rope_sin[pos * half..(pos + 1) * half];
        for i in 0..half {
            let (a, b) = (v[i], v[i + half]);
            v[i] = a * cos[i] + b * sin[i];
            v[i + half] = b * cos[i] - a * sin[i];
        }
    }

    fn embed_ids(&self, ids: &[u32]) -> Vec<F> {
        let d = self.config.d_model;
        let mut x = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let i = id as usize;
            x.extend_from_slice(&self.embed[i * d..(i + 1) * d]);
        }
        x
    }

    /// Causal self-attention on LayerNorm output `h`; returns the projected
    /// output and the (q, k, v, probs) needed for backward.
    fn attention(&self, block: &Block<F>, h: &[F], seq: usize) -> (Vec<F>, [Vec<F>; 4]) {
        let d = self.config.d_model;
        let nh = self.config.n_heads;
        let hd = self.config.head_dim();
        let qkv = linear_rows(&block.qkv, h);

        let mut q = vec![F::zero(); seq * d];
        let mut k = vec![F::zero(); seq * d];
        let mut v = vec![F::zero(); seq * d];
        for t in 0..seq {
            for head in 0..nh {
                let src = t * 3 * d + head * 3 * hd;
                let dst = t * d + head * hd;
                q[dst..dst + hd].copy_from_slice(&qkv[src..src + hd]);
                k[dst..dst + hd].copy_from_slice(&qkv[src + hd..src + 2 * hd]);
                v[dst..dst + hd].copy_from_slice(&qkv[src + 2 * hd..src + 3 * hd]);
                self.rope(&mut q[dst..dst + hd], t);
                self.rope(&mut k[dst..dst + hd], t);
            }
        }

        let scale = 1.0 / (hd as f64).sqrt();
        let mut probs = vec![F::zero(); nh * seq * seq];
        let mut ctx = vec![F::zero(); seq * d];
        let mut scores = vec![0.0f64; seq];
        for head in 0..nh {
            let off = head * hd;
            for i in 0..seq {
                let qi = &q[i * d + off..i * d + off + hd];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let s = F::lit(dot(qi, &k[j * d + off..j * d + off + hd]) * scale).as_f64();
                    scores[j] = s;
                    max = max.max(s);
                }
                let total: f64 = scores[..=i].iter().map(|s| (s - max).exp()).sum();
                let prow = &mut probs[(head * seq + i) * seq..(head * seq + i + 1) * seq];
                for j in 0..=i {
                    prow[j] = F::lit((scores[j] - max).exp() / total);
                }
                let out = &mut ctx[i * d + off..i * d + off + hd];
                for j in 0..=i {
                    let p = prow[j];
                    let vj = &v[j * d + off..j * d + off + hd];
                    for (o, &x) in out.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
        (linear_rows(&block.attn_out, &ctx), [q, k, v, probs])
    }

    fn mlp(&self, block: &Block<F>, h: &[F]) -> (Vec<F>, Vec<F>) {
        let pre = linear_rows(&block.ff_in, h);
        let act: Vec<F> = pre.iter().map(|&x| F::lit(gelu(x.as_f64()))).collect();
        (linear_rows(&block.ff_out, &act), pre)
    }

    /// One transformer block over a `seq x d_model` residual stream.
    pub(crate) fn block_forward(
        &self,
        layer: usize,
        x: &[F],
        seq: usize,
    ) -> (Vec<F>, BlockTrace<F>) {
        let block = &self.blocks[layer];
        let d = self.config.d_model;
        let eps = self.config.layernorm_epsilon;
        if self.config.parallel_residual {
            let (h1, ln1) = layer_norm(&block.ln1, x, d, eps);
            let (h2, ln2) = layer_norm(&block.ln2, x, d, eps);
            let (attn, [q, k, v, probs]) = self.attention(block, &h1, seq);
            let (mlp, pre_act) = self.mlp(block, &h2);
            let out = x
                .iter()
                .zip(attn.iter().zip(&mlp))
                .map(|(&xi, (&a, &m))| m + a + xi)
                .collect();
            (
                out,
                BlockTrace {
                    ln1,
                    ln2,
                    q,
                    k,
                    v,
                    probs,
                    pre_act,
                },
            )
        } else {
            let (h1, ln1) = layer_norm(&block.ln1, x, d, eps);
            let (attn, [q, k, v, probs]) = self.attention(block, &h1, seq);
            let mid: Vec<F> = x.iter().zip(&attn).map(|(&xi, &a)| xi + a).collect();
            let (h2, ln2) = layer_norm(&block.ln2, &mid, d, eps);
            let (mlp, pre_act) = self.mlp(block, &h2);
            let out = mid.iter().zip(&mlp).map(|(&h, &m)| h + m).collect();
            (
                out,
                BlockTrace {
                    ln1,
                    ln2,
                    q,
                    k,
                    v,
                    probs,
                    pre_act,
                },
            )
        }
    }

    /// Final LayerNorm and unembedding of one residual vector.
    pub(crate) fn head(&self, x_last: &[F]) -> HeadTrace<F> {
        let (logits, ln) = self.head_logits(x_last);
        HeadTrace {
            ln,
            log_probs: log_softmax(&logits),
        }
    }

    fn head_logits(&self, x_last: &[F]) -> (Vec<F>, LnTrace<F>) {
        let d = self.config.d_model;
        let (y, ln) = layer_norm(&self.final_ln, x_last, d, self.config.layernorm_epsilon);
        let u = self.unembedding();
        let logits = (0..self.config.vocab_size)
            .map(|t| F::lit(dot(&u[t * d..(t + 1) * d], &y)))
            .collect();
        (logits, ln)
    }

    /// Unnormalized next-token scores at the final position.
    pub fn logits(&self, ids: &[u32]) -> Result<Vec<F>> {
        self.check_ids(ids)?;
        let x = self.run_layers(self.embed_ids(ids), 0, ids.len(), |_, _, _| {});
        Ok(self.head_logits(self.last_row(&x)).0)
    }

    /// Next-token log-probabilities read off the residual stream `x_last`
    /// (after the last layer) at any position.
    pub fn log_probs_from_residual(&self, x_last: &[F]) -> Result<Vec<F>> {
        self.check_width(x_last)?;
        Ok(self.head(x_last).log_probs)
    }

    /// Runs layers `from..n_layers` on `x`, calling `on_layer` with each
    /// layer index, its output and its trace.
    pub(crate) fn run_layers(
        &self,
        mut x: Vec<F>,
        from: usize,
        seq: usize,
        mut on_layer: impl FnMut(usize, &[F], BlockTrace<F>),
    ) -> Vec<F> {
        for l in from..self.config.n_layers {
            let (out, trace) = self.block_forward(l, &x, seq);
            on_layer(l, &out, trace);
            x = out;
        }
        x
    }

    fn last_row<'a>(&self, x: &'a [F]) -> &'a [F] {
        let d = self.config.d_model;
        &x[x.len() - d..]
    }

    pub fn forward(&self, ids: &[u32]) -> Result<ForwardOutput<F>> {
        self.check_ids(ids)?;
        let seq = ids.len();
        let mut cache =
            ResidualCache::with_capacity(self.config.n_layers, seq, self.config.d_model);
        let x = self.run_layers(self.embed_ids(ids), 0, seq, |_, out, _| {
            cache.push_layer(out)
        });
        let log_probs = self.head(self.last_row(&x)).log_probs;
        Ok(ForwardOutput { log_probs, cache })
    }

    /// Forward pass on `ids` with the residual vector after `site.layer` at
    /// `site.position` replaced by `replacement`.
    pub fn forward_intervened(
        &self,
        ids: &[u32],
        site: HookSite,
        replacement: &[F],
    ) -> Result<Vec<F>> {
        self.check_ids(ids)?;
        self.check_site(site, ids.len())?;
        self.check_width(replacement)?;
        let seq = ids.len();
        let mut x = self.embed_ids(ids);
        for l in 0..=site.layer {
            x = self.block_forward(l, &x, seq).0;
        }
        self.finish_from(x, site, replacement)
    }

    /// Same as [`Self::forward_intervened`], starting from a cached residual
    /// stream of the base input instead of recomputing layers up to the site.
    pub fn resume(
        &self,
        cache: &ResidualCache<F>,
        site: HookSite,
        replacement: &[F],
    ) -> Result<Vec<F>> {
        self.check_site(site, cache.seq_len())?;
        self.check_width(replacement)?;
        self.finish_from(cache.layer(site.layer).to_vec(), site, replacement)
    }

    fn finish_from(&self, mut x: Vec<F>, site: HookSite, replacement: &[F]) -> Result<Vec<F>> {
        let d = self.config.d_model;
        let seq = x.len() / d;
        x[site.position * d..(site.position + 1) * d].copy_from_slice(replacement);
        let x = self.run_layers(x, site.layer + 1, seq, |_, _, _| {});
        Ok(self.head(self.last_row(&x)).log_probs)
    }

    pub(crate) fn check_width(&self, v: &[F]) -> Result<()> {
        if v.len() != self.config.d_model {
            return Err(Error::DimensionMismatch {
                expected: self.config.d_model,
                actual: v.len(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;

    fn single_head(rotary_fraction: f64) -> Model<f64> {
        let config = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 1,
            d_ff: 8,
            vocab_size: 4,
            max_positions: 40,
            rotary_fraction,
            parallel_residual: true,
            layernorm_epsilon: 1e-5,
            tied_embeddings: true,
            rotary_base: 10_000.0,
        };
        Model::random(config, 3, 0.5).unwrap()
    }

    #[test]
    fn rotary_scores_depend_on_offset_only() {
        let m = single_head(1.0);
        let q: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let k: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).cos()).collect();
        let score = |i: usize, j: usize| {
            let (mut qi, mut kj) = (q.clone(), k.clone());
            m.rope(&mut qi, i);
            m.rope(&mut kj, j);
            dot(&qi, &kj)
        };
        for offset in 0..5 {
            let reference = score(offset, 0);
            for start in 1..30 {
                assert!((score(start + offset, start) - reference).abs() < 1e-10);
            }
        }
        assert!((score(3, 0) - score(0, 0)).abs() > 1e-3);
    }

    #[test]
    fn rope_transpose_inverts_rope() {
        let m = single_head(0.5);
        let v: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let mut w = v.clone();
        m.rope(&mut w, 17);
        assert_ne!(w, v);
        m.rope_transpose(&mut w, 17);
        for (a, b) in w.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_matches_known_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.0, 0.8, 3.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
