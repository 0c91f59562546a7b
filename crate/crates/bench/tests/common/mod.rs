#![allow(dead_code)]

use featbench::container::Tensor;
use featbench::model::Model;
use featbench::taskgen::{load_task_spec, TaskTemplate};
use featbench::tokenizer::Tokenizer;
use featbench_cli::fixture::{covering_tokenizer, small_config};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Toy task whose last region carries the label variable, so the final
/// position's residual is the cue word's embedding.
pub const PLANTED_TASK: &str = r#"{
  "name": "planted",
  "types": ["pos", "neg"],
  "regions": [
    {"name": "det", "kind": "constant", "text": "the"},
    {"name": "adj", "kind": "variable", "options": ["red", "old", "tall", "calm", "loud", "shy", "bold", "kind", "wild", "slow"]},
    {"name": "noun", "kind": "variable", "options": ["cat", "man", "ship", "tree", "king", "lamp", "road", "bird", "coat", "drum"]},
    {"name": "cue", "kind": "label_variable", "options": {
      "pos": ["alpha", "beta", "gamma", "delta", "omega", "sigma", "kappa", "theta"],
      "neg": ["north", "south", "east", "west", "up", "down", "left", "right"]
    }}
  ],
  "label_options": {"pos": [" yes"], "neg": [" no"]}
}"#;

#[derive(Debug, Clone)]
pub struct PlantedParams {
    pub d_model: usize,
    pub n_layers: usize,
    /// Displacement of cue words along the planted direction.
    pub signal: f64,
    /// Angle in degrees between the cue displacement and the planted
    /// direction. Interchange along the displacement transfers exactly the
    /// class signal; the best single direction bisects the two.
    pub tilt_deg: f64,
    /// Norm of per-token isotropic noise.
    pub noise: f64,
    /// Shared component that keeps the final LayerNorm scale nearly fixed.
    pub offset: f64,
    /// Label logit gap at full signal.
    pub logit_gap: f64,
    pub seed: u64,
}

impl Default for PlantedParams {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 2,
            signal: 1.0,
            tilt_deg: 30.0,
            noise: 0.3,
            offset: 20.0,
            logit_gap: 4.0,
            seed: 0,
        }
    }
}

pub struct Planted {
    pub template: TaskTemplate,
    pub tok: Tokenizer,
    pub model: Model<f32>,
    pub direction: Vec<f64>,
    /// Unit vector along which cue words of the two classes differ.
    pub displacement: Vec<f64>,
    /// Unit bisector of `direction` and `displacement`.
    pub bisector: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rows 1..=k of the Sylvester Hadamard matrix of order `d`, scaled to unit
/// norm: orthonormal, orthogonal to the all-ones vector, and with entries of
/// equal magnitude so that sign-like optimizer updates point along them.
fn hadamard_frame(d: usize, k: usize) -> Vec<Vec<f64>> {
    assert!(d.is_power_of_two() && k < d);
    let scale = 1.0 / (d as f64).sqrt();
    (1..=k)
        .map(|i| {
            (0..d)
                .map(|j| {
                    if (i & j).count_ones() % 2 == 0 {
                        scale
                    } else {
                        -scale
                    }
                })
                .collect()
        })
        .collect()
}

/// Model whose attention and MLP blocks write nothing, so every layer's
/// residual at a position is that token's embedding, and whose label logit
/// gap is `2 k (h . d) / sigma(h)` for the planted direction `d`.
pub fn planted(p: &PlantedParams) -> Planted {
    let template = load_task_spec(PLANTED_TASK).unwrap();
    let tok = covering_tokenizer(std::slice::from_ref(&template)).unwrap();
    let d = p.d_model;
    let cfg = small_config(tok.vocab_size(), d, p.n_layers);
    let mut t = Model::<f32>::random(cfg.clone(), p.seed, 0.02)
        .unwrap()
        .to_tensors();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x5eed);
    let frame = hadamard_frame(d, 3);
    let (half, shared) = (p.tilt_deg.to_radians() / 2.0, &frame[2]);
    let mix = |sign: f64| -> Vec<f64> {
        (0..d)
            .map(|j| half.cos() * frame[0][j] + sign * half.sin() * frame[1][j])
            .collect()
    };
    let (dir, disp) = (mix(1.0), mix(-1.0));
    // Scaled so the component along `dir` is `signal`.
    let disp_len = p.signal / p.tilt_deg.to_radians().cos();

    let zero = |t: &mut featbench::container::TensorMap, name: String| {
        let x = t.get_mut(&name).unwrap();
        x.data.iter_mut().for_each(|v| *v = 0.0);
    };
    for l in 0..p.n_layers {
        for part in ["attention.dense", "mlp.dense_4h_to_h"] {
            zero(&mut t, format!("gpt_neox.layers.{l}.{part}.weight"));
            zero(&mut t, format!("gpt_neox.layers.{l}.{part}.bias"));
        }
    }
    t.insert(
        "gpt_neox.final_layer_norm.weight".into(),
        Tensor::vector(vec![1.0; d]),
    );
    t.insert(
        "gpt_neox.final_layer_norm.bias".into(),
        Tensor::vector(vec![0.0; d]),
    );

    let class_of = |word: &str| -> Option<f64> {
        let featbench::taskgen::RegionContent::LabelVariable(opts) = &template.regions[3].content
        else {
            unreachable!()
        };
        let w = word.trim_start();
        if opts["pos"].iter().any(|o| o == w) {
            Some(1.0)
        } else if opts["neg"].iter().any(|o| o == w) {
            Some(-1.0)
        } else {
            None
        }
    };
    let mut embed = Vec::with_capacity(tok.vocab_size() * d);
    for id in 0..tok.vocab_size() as u32 {
        let word = tok.id_to_token(id).unwrap();
        let mut noise: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let m = noise.iter().sum::<f64>() / d as f64;
        noise.iter_mut().for_each(|x| *x -= m);
        let n = dot(&noise, &noise).sqrt();
        let sign = class_of(word).unwrap_or(0.0);
        for j in 0..d {
            let v = p.offset * shared[j] + p.noise * noise[j] / n + sign * disp_len * disp[j];
            embed.push(v as f32);
        }
    }
    t.insert(
        "gpt_neox.embed_in.weight".into(),
        Tensor::new(vec![tok.vocab_size(), d], embed),
    );

    // sigma(h) is close to offset / sqrt(d), so a logit gap of `logit_gap`
    // per unit of signal needs k = logit_gap * offset / (2 sqrt(d)).
    let k = p.logit_gap * p.offset / (2.0 * (d as f64).sqrt());
    let mut unembed = vec![0.0f32; tok.vocab_size() * d];
    for (label, s) in [(" yes", 1.0), (" no", -1.0)] {
        let id = tok.token_to_id(label).unwrap() as usize;
        for j in 0..d {
            unembed[id * d + j] = (s * k * dir[j]) as f32;
        }
    }
    t.insert(
        "embed_out.weight".into(),
        Tensor::new(vec![tok.vocab_size(), d], unembed),
    );

    Planted {
        model: Model::from_tensors(cfg, &t).unwrap(),
        template,
        tok,
        direction: dir,
        displacement: disp,
        bisector: frame[0].clone(),
    }
}

/// A random 2-layer model directory covering `task`, and a run config over
/// it with small splits.
pub fn fixture_run(
    dir: &std::path::Path,
    task: &str,
    d_model: usize,
    methods: Vec<featbench::featfind::Method>,
) -> featbench_cli::RunConfig {
    let template = featbench_cli::config::load_task(task).unwrap();
    let model_dir = dir.join("model");
    featbench_cli::fixture::write_fixture_model_dir(&model_dir, &[template], d_model, 2, 7)
        .unwrap();
    featbench_cli::RunConfig {
        model_dir,
        tasks: vec![task.to_string()],
        methods,
        n_train_pairs: 20,
        n_eval_pairs: 10,
        probe_l2: Some(vec![1.0]),
        out_dir: dir.join("out"),
        ..Default::default()
    }
}

pub const SEVEN: [featbench::featfind::Method; 7] = {
    use featbench::featfind::Method::*;
    [Das, Probe, Mean, Pca, Kmeans, Lda, Random]
};
