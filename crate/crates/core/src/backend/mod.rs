//! Gray-box access to the language model: per-token log-probabilities,
//! prompt embeddings, greedy generation and tokenization.
//!
//! [`HttpBackend`] talks to an OpenAI-compatible server, [`MockBackend`] is a
//! deterministic in-process stand-in whose responses can be wired per input,
//! and [`CachedBackend`] wraps either with an append-only on-disk cache.

mod cache;
mod http;
mod limiter;
mod mock;

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use self::cache::{CacheStats, CachedBackend, ResponseCache};
pub use self::http::{HttpBackend, ScoreMode};
pub use self::limiter::{InFlightLimiter, Permit};
pub use self::mock::{MockBackend, MockStats, MockTableRecord, SimulatedLatency};
use crate::error::{Error, Result};
use crate::prompting::TokenCounter;

/// Log-probabilities for a token sequence whose last `continuation_len`
/// entries belong to the scored continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogProbSequence {
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
    pub continuation_len: usize,
}

impl LogProbSequence {
    pub fn new(tokens: Vec<String>, logprobs: Vec<f64>, continuation_len: usize) -> Result<Self> {
        let seq = Self {
            tokens,
            logprobs,
            continuation_len,
        };
        seq.validate()?;
        Ok(seq)
    }

    /// A sequence made entirely of continuation tokens.
    pub fn continuation_only(tokens: Vec<String>, logprobs: Vec<f64>) -> Result<Self> {
        let n = logprobs.len();
        Self::new(tokens, logprobs, n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.logprobs.len() {
            return Err(Error::MalformedResponse(format!(
                "{} tokens but {} logprobs",
                self.tokens.len(),
                self.logprobs.len()
            )));
        }
        if self.continuation_len > self.tokens.len() {
            return Err(Error::MalformedResponse(format!(
                "continuation length {} exceeds sequence length {}",
                self.continuation_len,
                self.tokens.len()
            )));
        }
        if let Some(bad) = self.logprobs.iter().find(|lp| !(lp.is_finite() && **lp <= 0.0)) {
            return Err(Error::MalformedResponse(format!("log-probability {bad} is not in (-inf, 0]")));
        }
        Ok(())
    }

    pub fn continuation_logprobs(&self) -> &[f64] {
        &self.logprobs[self.logprobs.len() - self.continuation_len..]
    }
}

/// A prompt representation taken from inside the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub source_layer: u32,
    pub source_token: String,
    pub backend_id: String,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// Server root, e.g. `http://localhost:8000`.
    pub base_url: String,
    pub model_name: String,
    pub api_key: Option<String>,
    #[serde(with = "duration_secs")]
    pub request_timeout: Duration,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub cache_path: Option<PathBuf>,
    pub score_mode: ScoreMode,
    /// Recorded on embeddings; the server decides which layer it exposes.
    pub embedding_layer: u32,
    pub embedding_token: String,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000".into(),
            model_name: "codellama/CodeLlama-7b-hf".into(),
            api_key: None,
            request_timeout: Duration::from_secs(120),
            max_in_flight: 4,
            max_retries: 3,
            cache_path: None,
            score_mode: ScoreMode::Echo,
            embedding_layer: 16,
            embedding_token: "EOS".into(),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

mod duration_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

/// The four capabilities the toolkit needs from a model. Implementations are
/// shared across threads; concurrency limits are their own business.
pub trait Backend: TokenCounter + Send + Sync {
    /// Identifies the model behind the backend; part of every cache key.
    fn id(&self) -> &str;

    /// Log-probabilities of each `continuation` token given `context` and
    /// the preceding continuation tokens, at temperature 0.
    fn score(&self, context: &str, continuation: &str) -> Result<LogProbSequence>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector>;

    /// Greedy completion of at most `max_new_tokens` tokens.
    fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String>;

    /// Deterministic request cost for backends that run on a virtual clock.
    /// `None` means callers should measure wall time.
    fn simulated_latency(&self, _context: &str, _continuation: &str) -> Option<Duration> {
        None
    }
}

pub(crate) fn require_nonempty(what: &str, text: &str) -> Result<()> {
    if text.is_empty() {
        Err(Error::precondition(format!("{what} must be non-empty")))
    } else {
        Ok(())
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn score(&self, context: &str, continuation: &str) -> Result<LogProbSequence> {
        (**self).score(context, continuation)
    }
    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        (**self).embed(text)
    }
    fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String> {
        (**self).generate(prompt, max_new_tokens)
    }
    fn simulated_latency(&self, context: &str, continuation: &str) -> Option<Duration> {
        (**self).simulated_latency(context, continuation)
    }
}

impl<B: Backend + ?Sized> TokenCounter for &B {
    fn count_tokens(&self, text: &str) -> Result<usize> {
        (**self).count_tokens(text)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn score(&self, context: &str, continuation: &str) -> Result<LogProbSequence> {
        (**self).score(context, continuation)
    }
    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        (**self).embed(text)
    }
    fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String> {
        (**self).generate(prompt, max_new_tokens)
    }
    fn simulated_latency(&self, context: &str, continuation: &str) -> Option<Duration> {
        (**self).simulated_latency(context, continuation)
    }
}

impl<B: Backend + ?Sized> TokenCounter for Box<B> {
    fn count_tokens(&self, text: &str) -> Result<usize> {
        (**self).count_tokens(text)
    }
}
