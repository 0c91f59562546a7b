//! Vector-Jacobian products for the activations above an intervention site.
//!
//! Weights are frozen, so only activation gradients are propagated: linear
//! layers need `W^T dy`, LayerNorm and attention reuse the forward traces.

use super::forward::{gelu_grad, BlockTrace, LnTrace};
use super::{Block, HookSite, LayerNorm, Linear, Model, ResidualCache};
use crate::error::{Error, Result};
use crate::num::{dot, Real};

/// `dx = W^T dy` for every row of `dy`.
fn linear_back<F: Real>(lin: &Linear<F>, dy: &[F]) -> Vec<F> {
    let rows = dy.len() / lin.n_out;
    let mut dx = Vec::with_capacity(rows * lin.n_in);
    let mut acc = vec![0.0f64; lin.n_in];
    for r in 0..rows {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for o in 0..lin.n_out {
            let g = dy[r * lin.n_out + o].as_f64();
            if g == 0.0 {
                continue;
            }
            let w = &lin.weight[o * lin.n_in..(o + 1) * lin.n_in];
            for (a, &wi) in acc.iter_mut().zip(w) {
                *a += g * wi.as_f64();
            }
        }
        dx.extend(acc.iter().map(|&a| F::lit(a)));
    }
    dx
}

fn layer_norm_back<F: Real>(ln: &LayerNorm<F>, trace: &LnTrace<F>, dy: &[F], d: usize) -> Vec<F> {
    let mut dx = vec![F::zero(); dy.len()];
    let mut dxhat = vec![0.0f64; d];
    for (r, &rs) in trace.rstd.iter().enumerate() {
        let xhat = &trace.xhat[r * d..(r + 1) * d];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            let g = dy[r * d + j].as_f64() * ln.weight[j].as_f64();
            dxhat[j] = g;
            m1 += g;
            m2 += g * xhat[j].as_f64();
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let rs = rs.as_f64();
        for j in 0..d {
            dx[r * d + j] = F::lit(rs * (dxhat[j] - m1 - xhat[j].as_f64() * m2));
        }
    }
    dx
}

impl<F: Real> Model<F> {
    fn attention_back(
        &self,
        block: &Block<F>,
        t: &BlockTrace<F>,
        dout: &[F],
        seq: usize,
    ) -> Vec<F> {
        let d = self.config.d_model;
        let nh = self.config.n_heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let dctx = linear_back(&block.attn_out, dout);

        let mut dq = vec![0.0f64; seq * d];
        let mut dk = vec![0.0f64; seq * d];
        let mut dv = vec![0.0f64; seq * d];
        let mut dp = vec![0.0f64; seq];
        for head in 0..nh {
            let off = head * hd;
            for i in 0..seq {
                let gi = &dctx[i * d + off..i * d + off + hd];
                let prow = &t.probs[(head * seq + i) * seq..(head * seq + i + 1) * seq];
                let mut weighted = 0.0;
                for j in 0..=i {
                    dp[j] = dot(gi, &t.v[j * d + off..j * d + off + hd]);
                    weighted += prow[j].as_f64() * dp[j];
                    let p = prow[j].as_f64();
                    for (o, &g) in dv[j * d + off..j * d + off + hd].iter_mut().zip(gi) {
                        *o += p * g.as_f64();
                    }
                }
                let qi = &t.q[i * d + off..i * d + off + hd];
                for j in 0..=i {
                    let ds = prow[j].as_f64() * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &t.k[j * d + off..j * d + off + hd];
                    for c in 0..hd {
                        dq[i * d + off + c] += ds * kj[c].as_f64();
                        dk[j * d + off + c] += ds * qi[c].as_f64();
                    }
                }
            }
        }

        let mut dqkv = vec![F::zero(); seq * 3 * d];
        let mut buf = vec![F::zero(); hd];
        for pos in 0..seq {
            for head in 0..nh {
                let src = pos * d + head * hd;
                let dst = pos * 3 * d + head * 3 * hd;
                for (part, grads, rotate) in [(0, &dq, true), (1, &dk, true), (2, &dv, false)] {
                    for c in 0..hd {
                        buf[c] = F::lit(grads[src + c]);
                    }
                    if rotate {
                        self.rope_transpose(&mut buf, pos);
                    }
                    dqkv[dst + part * hd..dst + (part + 1) * hd].copy_from_slice(&buf);
                }
            }
        }
        linear_back(&block.qkv, &dqkv)
    }

    fn mlp_back(&self, block: &Block<F>, t: &BlockTrace<F>, dout: &[F]) -> Vec<F> {
        let dact = linear_back(&block.ff_out, dout);
        let dpre: Vec<F> = dact
            .iter()
            .zip(&t.pre_act)
            .map(|(&g, &x)| F::lit(g.as_f64() * gelu_grad(x.as_f64())))
            .collect();
        linear_back(&block.ff_in, &dpre)
    }

    /// Gradient with respect to a block's input given its output gradient.
    fn block_back(&self, layer: usize, t: &BlockTrace<F>, dout: &[F], seq: usize) -> Vec<F> {
        let block = &self.blocks[layer];
        let d = self.config.d_model;
        if self.config.parallel_residual {
            let da = layer_norm_back(
                &block.ln1,
                &t.ln1,
                &self.attention_back(block, t, dout, seq),
                d,
            );
            let dm = layer_norm_back(&block.ln2, &t.ln2, &self.mlp_back(block, t, dout), d);
            dout.iter()
                .zip(da.iter().zip(&dm))
                .map(|(&g, (&a, &m))| g + a + m)
                .collect()
        } else {
            let dm = layer_norm_back(&block.ln2, &t.ln2, &self.mlp_back(block, t, dout), d);
            let dmid: Vec<F> = dout.iter().zip(&dm).map(|(&g, &m)| g + m).collect();
            let da = layer_norm_back(
                &block.ln1,
                &t.ln1,
                &self.attention_back(block, t, &dmid, seq),
                d,
            );
            dmid.iter().zip(&da).map(|(&g, &a)| g + a).collect()
        }
    }

    /// Loss `-log p(target)` after replacing the residual at `site` in the
    /// base run by `replacement`, and its gradient with respect to the
    /// replacement vector.
    fn replacement_grad(
        &self,
        base: &ResidualCache<F>,
        site: HookSite,
        replacement: &[F],
        target: u32,
    ) -> Result<(f64, Vec<f64>)> {
        let d = self.config.d_model;
        let seq = base.seq_len();
        if target as usize >= self.config.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: target,
                vocab_size: self.config.vocab_size,
            });
        }
        let mut x = base.layer(site.layer).to_vec();
        x[site.position * d..(site.position + 1) * d].copy_from_slice(replacement);

        let mut traces = Vec::with_capacity(self.config.n_layers - site.layer - 1);
        let x = self.run_layers(x, site.layer + 1, seq, |_, _, t| traces.push(t));
        let head = self.head(&x[(seq - 1) * d..]);
        let loss = -head.log_probs[target as usize].as_f64();

        let u = self.unembedding();
        let mut dy = vec![0.0f64; d];
        for (tok, lp) in head.log_probs.iter().enumerate() {
            let g = lp.as_f64().exp() - if tok == target as usize { 1.0 } else { 0.0 };
            for (o, &w) in dy.iter_mut().zip(&u[tok * d..(tok + 1) * d]) {
                *o += g * w.as_f64();
            }
        }
        let dy: Vec<F> = dy.into_iter().map(F::lit).collect();
        let dlast = layer_norm_back(&self.final_ln, &head.ln, &dy, d);

        let mut grad = vec![F::zero(); seq * d];
        grad[(seq - 1) * d..].copy_from_slice(&dlast);
        for (i, trace) in traces.iter().enumerate().rev() {
            grad = self.block_back(site.layer + 1 + i, trace, &grad, seq);
        }
        let g = grad[site.position * d..(site.position + 1) * d]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        Ok((loss, g))
    }

    /// Loss and direction gradient from a cached base run and a source
    /// residual vector `h_s`.
    pub fn direction_grad_cached(
        &self,
        base: &ResidualCache<F>,
        site: HookSite,
        h_s: &[F],
        a: &[f64],
        target: u32,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_site(site, base.seq_len())?;
        self.check_width(h_s)?;
        if a.len() != self.config.d_model {
            return Err(Error::DimensionMismatch {
                expected: self.config.d_model,
                actual: a.len(),
            });
        }
        let h_b = base.get(site.layer, site.position);
        let delta: Vec<f64> = h_s
            .iter()
            .zip(h_b)
            .map(|(&s, &b)| s.as_f64() - b.as_f64())
            .collect();
        let c = dot(&delta, a);
        let replacement: Vec<F> = h_b
            .iter()
            .zip(a)
            .map(|(&b, &ai)| F::lit(b.as_f64() + c * ai))
            .collect();
        let (loss, g) = self.replacement_grad(base, site, &replacement, target)?;
        let ga = dot(&g, a);
        let grad = g
            .iter()
            .zip(&delta)
            .map(|(&gi, &di)| c * gi + ga * di)
            .collect();
        Ok((loss, grad))
    }

    /// `-log p(target | b, s)` under the one-dimensional interchange along
    /// `a`, and its gradient with respect to `a`. Only activations above the
    /// base site receive gradient.
    pub fn direction_grad(
        &self,
        ids_b: &[u32],
        ids_s: &[u32],
        site_b: HookSite,
        site_s: HookSite,
        a: &[f64],
        target: u32,
    ) -> Result<(f64, Vec<f64>)> {
        let src = self.forward(ids_s)?;
        self.check_site(site_s, ids_s.len())?;
        let base = self.forward(ids_b)?;
        let h_s = src.cache.get(site_s.layer, site_s.position);
        self.direction_grad_cached(&base.cache, site_b, h_s, a, target)
    }
}
