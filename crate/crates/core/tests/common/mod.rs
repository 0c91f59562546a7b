#![allow(dead_code)]

use featbench::container::TensorMap;
use featbench::model::{Model, ModelConfig};
use featbench::taskgen::{build_dataset, bundled, Dataset, TaskTemplate};
use featbench::tokenizer::Tokenizer;

/// Initializer scale of the pythia family.
pub const INIT_STD: f64 = 0.02;

pub fn fixture_config(d_model: usize, parallel: bool) -> ModelConfig {
    ModelConfig {
        n_layers: 3,
        d_model,
        n_heads: if d_model >= 16 { 4 } else { 2 },
        d_ff: 2 * d_model,
        vocab_size: 13,
        max_positions: 64,
        rotary_fraction: 0.5,
        parallel_residual: parallel,
        layernorm_epsilon: 1e-5,
        tied_embeddings: false,
        rotary_base: 10_000.0,
    }
}

pub fn fixture_model(d_model: usize, parallel: bool, seed: u64) -> Model<f32> {
    Model::random(fixture_config(d_model, parallel), seed, 0.4).unwrap()
}

fn get(t: &TensorMap, name: &str) -> Vec<f64> {
    t[name].data.iter().map(|&x| f64::from(x)).collect()
}

fn layer_norm(x: &[f64], w: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + eps).sqrt() * w[i] + b[i])
        .collect()
}

fn matvec(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    (0..b.len())
        .map(|o| b[o] + (0..n_in).map(|i| w[o * n_in + i] * x[i]).sum::<f64>())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

/// Rotates the first `rot` dims the way the reference GPT-NeoX code does:
/// `x * cos + rotate_half(x) * sin` with frequencies duplicated across halves.
fn rotary(x: &mut [f64], rot: usize, pos: usize, base: f64) {
    let half = rot / 2;
    let orig = x[..rot].to_vec();
    for c in 0..rot {
        let inv_freq = 1.0 / base.powf((2 * (c % half)) as f64 / rot as f64);
        let angle = pos as f64 * inv_freq;
        let rotated = if c < half {
            -orig[c + half]
        } else {
            orig[c - half]
        };
        x[c] = orig[c] * angle.cos() + rotated * angle.sin();
    }
}

/// Straight-line final-position logits computed from the raw tensors.
pub fn oracle_logits(cfg: &ModelConfig, t: &TensorMap, ids: &[u32]) -> Vec<f64> {
    let d = cfg.d_model;
    let hd = d / cfg.n_heads;
    let rot = (hd as f64 * cfg.rotary_fraction) as usize;
    let eps = cfg.layernorm_epsilon;
    let embed = get(t, "gpt_neox.embed_in.weight");
    let mut x: Vec<Vec<f64>> = ids
        .iter()
        .map(|&i| embed[i as usize * d..(i as usize + 1) * d].to_vec())
        .collect();
    let seq = ids.len();
    for l in 0..cfg.n_layers {
        let p = |s: &str| get(t, &format!("gpt_neox.layers.{l}.{s}"));
        let (ln1w, ln1b) = (p("input_layernorm.weight"), p("input_layernorm.bias"));
        let (ln2w, ln2b) = (
            p("post_attention_layernorm.weight"),
            p("post_attention_layernorm.bias"),
        );
        let (qkvw, qkvb) = (
            p("attention.query_key_value.weight"),
            p("attention.query_key_value.bias"),
        );
        let (ow, ob) = (p("attention.dense.weight"), p("attention.dense.bias"));
        let (f1w, f1b) = (p("mlp.dense_h_to_4h.weight"), p("mlp.dense_h_to_4h.bias"));
        let (f2w, f2b) = (p("mlp.dense_4h_to_h.weight"), p("mlp.dense_4h_to_h.bias"));

        let attn = |x: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            let qkv: Vec<Vec<f64>> = x
                .iter()
                .map(|r| matvec(&qkvw, &qkvb, &layer_norm(r, &ln1w, &ln1b, eps)))
                .collect();
            let mut ctx = vec![vec![0.0; d]; seq];
            for h in 0..cfg.n_heads {
                let part = |pos: usize, which: usize| {
                    let s = h * 3 * hd + which * hd;
                    let mut v = qkv[pos][s..s + hd].to_vec();
                    if which < 2 {
                        rotary(&mut v, rot, pos, cfg.rotary_base);
                    }
                    v
                };
                for i in 0..seq {
                    let q = part(i, 0);
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| {
                            let k = part(j, 1);
                            q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for j in 0..=i {
                        let w = (scores[j] - m).exp() / z;
                        let v = part(j, 2);
                        for c in 0..hd {
                            ctx[i][h * hd + c] += w * v[c];
                        }
                    }
                }
            }
            ctx.iter().map(|c| matvec(&ow, &ob, c)).collect()
        };
        let mlp = |r: &Vec<f64>| -> Vec<f64> {
            let pre = matvec(&f1w, &f1b, &layer_norm(r, &ln2w, &ln2b, eps));
            let act: Vec<f64> = pre.into_iter().map(gelu).collect();
            matvec(&f2w, &f2b, &act)
        };
        if cfg.parallel_residual {
            let a = attn(&x);
            x = (0..seq)
                .map(|i| {
                    let m = mlp(&x[i]);
                    (0..d).map(|c| x[i][c] + a[i][c] + m[c]).collect()
                })
                .collect();
        } else {
            let a = attn(&x);
            let mid: Vec<Vec<f64>> = (0..seq)
                .map(|i| (0..d).map(|c| x[i][c] + a[i][c]).collect())
                .collect();
            x = mid
                .iter()
                .map(|r| {
                    let m = mlp(r);
                    (0..d).map(|c| r[c] + m[c]).collect()
                })
                .collect();
        }
    }
    let y = layer_norm(
        &x[seq - 1],
        &get(t, "gpt_neox.final_layer_norm.weight"),
        &get(t, "gpt_neox.final_layer_norm.bias"),
        eps,
    );
    let u = if cfg.tied_embeddings {
        embed
    } else {
        get(t, "embed_out.weight")
    };
    (0..cfg.vocab_size)
        .map(|v| (0..d).map(|c| u[v * d + c] * y[c]).sum())
        .collect()
}

/// A bundled task with its dataset, a lookup tokenizer covering it, and a
/// random model over that vocabulary.
pub struct TaskFixture {
    pub template: TaskTemplate,
    pub dataset: Dataset,
    pub tok: Tokenizer,
    pub model: Model<f32>,
}

pub fn task_fixture(task: &str, d_model: usize, n_layers: usize, seed: u64) -> TaskFixture {
    task_fixture_sized(task, d_model, n_layers, seed, 20, 10)
}

pub fn task_fixture_sized(
    task: &str,
    d_model: usize,
    n_layers: usize,
    seed: u64,
    n_train: usize,
    n_eval: usize,
) -> TaskFixture {
    let template = bundled::load(task).unwrap().unwrap();
    let dataset = build_dataset(&template, n_train, n_eval, seed).unwrap();
    let labels: Vec<String> = dataset
        .train
        .iter()
        .chain(&dataset.eval)
        .map(|e| e.base_label.clone())
        .chain(template.control_labels.iter().cloned())
        .collect();
    let texts = dataset
        .train
        .iter()
        .chain(&dataset.eval)
        .map(|e| e.base.as_str())
        .chain(labels.iter().map(String::as_str));
    let tok = Tokenizer::lookup_covering(&[], texts).unwrap();
    let config = ModelConfig {
        n_layers,
        vocab_size: tok.vocab_size(),
        ..fixture_config(d_model, false)
    };
    let model = Model::random(config, seed, 0.4).unwrap();
    TaskFixture {
        template,
        dataset,
        tok,
        model,
    }
}
