//! Few-shot example selection for code-generation prompts: perplexity
//! scoring against a language-model backend, example rankers, and the
//! experiment harness built on them.

pub mod backend;
pub mod dataset;
pub mod error;
pub mod evalharness;
pub mod metrics;
pub mod mlpranker;
pub mod prompting;
pub mod rankers;

pub use error::{Error, Result};
