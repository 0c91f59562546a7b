//! Self-contained model directories with a word-level vocabulary, for runs
//! that do not need a pretrained checkpoint.

use std::path::Path;

use featbench::model::{Model, ModelConfig};
use featbench::taskgen::{RegionContent, TaskTemplate};
use featbench::tokenizer::Tokenizer;

use crate::config::{CONFIG_FILE, WEIGHTS_FILE};
use crate::error::Result;

/// Every string a template can put into a sentence or a label position.
pub fn template_texts(t: &TaskTemplate) -> Vec<String> {
    let mut out = Vec::new();
    for r in &t.regions {
        let opts: Vec<&String> = match &r.content {
            RegionContent::Constant(text) => vec![text],
            RegionContent::Variable(opts) => opts.iter().collect(),
            RegionContent::LabelVariable(opts) => opts.values().flatten().collect(),
        };
        for o in opts {
            out.push(o.clone());
            out.push(format!(" {o}"));
        }
    }
    out.extend(t.label_options.values().flatten().cloned());
    out.extend(t.control_labels.iter().cloned());
    out
}

/// Lookup tokenizer covering every sentence and label of `templates`.
pub fn covering_tokenizer(templates: &[TaskTemplate]) -> Result<Tokenizer> {
    let texts: Vec<String> = templates.iter().flat_map(template_texts).collect();
    Ok(Tokenizer::lookup_covering(
        &[],
        texts.iter().map(String::as_str),
    )?)
}

/// A small parallel-residual config over `vocab_size` tokens.
pub fn small_config(vocab_size: usize, d_model: usize, n_layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model,
        n_heads: if d_model.is_multiple_of(16) { 4 } else { 1 },
        d_ff: 4 * d_model,
        vocab_size,
        max_positions: 128,
        rotary_fraction: 0.5,
        parallel_residual: true,
        layernorm_epsilon: 1e-5,
        tied_embeddings: false,
        rotary_base: 10_000.0,
    }
}

/// Writes `vocab.txt`, `config.json` and `model.safetensors` into `dir`.
pub fn write_model_dir(dir: &Path, tok: &Tokenizer, model: &Model<f32>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("vocab.txt"), tok.to_vocab_text())?;
    let json = serde_json::to_string_pretty(model.config()).expect("config serializes");
    std::fs::write(dir.join(CONFIG_FILE), json)?;
    model.save_checkpoint(&dir.join(WEIGHTS_FILE))?;
    Ok(())
}

/// Random model over a vocabulary covering `templates`, written to `dir`.
pub fn write_fixture_model_dir(
    dir: &Path,
    templates: &[TaskTemplate],
    d_model: usize,
    n_layers: usize,
    seed: u64,
) -> Result<Model<f32>> {
    let tok = covering_tokenizer(templates)?;
    let cfg = small_config(tok.vocab_size(), d_model, n_layers);
    let model = Model::<f32>::random(cfg, seed, 0.4)?;
    write_model_dir(dir, &tok, &model)?;
    Ok(model)
}
