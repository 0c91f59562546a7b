//! Error type shared by every module of the crate.

use thiserror::Error;

/// Result alias used throughout `featbench`.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // -- task specs --
    #[error("task spec parse error at {path}: {message}")]
    TaskParse { path: String, message: String },

    #[error("task spec `{task}` violates invariant: {rule}")]
    TaskInvariant { task: String, rule: String },

    #[error(
        "template `{task}` exhausted after {attempts} resamples while building a disjoint eval set"
    )]
    Exhausted { task: String, attempts: usize },

    // -- tokenizer --
    #[error("cannot encode empty text")]
    EmptyText,

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("unknown token id {0}")]
    UnknownId(u32),

    #[error("region `{region}` does not end on a token boundary in {sentence:?}")]
    BoundaryMismatch { region: String, sentence: String },

    #[error("label {label:?} encodes to {n_tokens} tokens, expected exactly one")]
    MultiTokenLabel { label: String, n_tokens: usize },

    #[error("tokenizer file error: {0}")]
    TokenizerFile(String),

    // -- model --
    #[error("checkpoint container error: {0}")]
    Container(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("tensor `{0}` contains a non-finite value")]
    NonFinite(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("sequence length {len} outside [1, {max}]")]
    SequenceLength { len: usize, max: usize },

    #[error("hook site (layer {layer}, position {position}) out of range for {n_layers} layers x {seq_len} tokens")]
    SiteOutOfRange {
        layer: usize,
        position: usize,
        n_layers: usize,
        seq_len: usize,
    },

    #[error("token id {id} outside vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    // -- linear algebra / fitting --
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("direction has zero norm")]
    ZeroVector,

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("region `{0}` not found")]
    UnknownRegion(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
