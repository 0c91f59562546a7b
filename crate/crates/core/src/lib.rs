//! Locating linguistic features in a small decoder-only transformer with
//! one-dimensional interchange interventions.

pub mod container;
pub mod error;
pub mod featfind;
pub mod intervene;
pub mod metrics;
pub mod model;
pub mod num;
pub mod taskgen;
pub mod tokenizer;

pub use error::{Error, Result};
