use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::limiter::InFlightLimiter;
use super::{require_nonempty, Backend, EmbeddingVector, LogProbSequence};
use crate::error::{Error, Result};
use crate::prompting::{whitespace_token_count, TokenCounter};

pub type ScoreFn = dyn Fn(&str, &str) -> Vec<f64> + Send + Sync;
pub type EmbedFn = dyn Fn(&str) -> Vec<f64> + Send + Sync;

pub const DEFAULT_MOCK_DIM: usize = 32;

/// Virtual request cost: `base + per_token * (context + continuation tokens)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatedLatency {
    pub base: Duration,
    pub per_token: Duration,
}

#[derive(Debug, Default)]
pub struct MockStats {
    pub score_calls: AtomicUsize,
    pub embed_calls: AtomicUsize,
    pub generate_calls: AtomicUsize,
    pub count_calls: AtomicUsize,
}

impl MockStats {
    pub fn total(&self) -> usize {
        self.score_calls.load(Ordering::SeqCst)
            + self.embed_calls.load(Ordering::SeqCst)
            + self.generate_calls.load(Ordering::SeqCst)
    }
}

/// One line of a mock wiring file (JSON lines, tagged by `op`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum MockTableRecord {
    Score {
        context: String,
        continuation: String,
        logprobs: Vec<f64>,
    },
    Embed {
        text: String,
        values: Vec<f64>,
    },
    Generate {
        prompt: String,
        completion: String,
    },
}

/// Deterministic in-process backend.
///
/// Scoring consults, in order: the exact `(context, continuation)` table, the
/// wired scorer function, then the default rule (all-zero log-probabilities,
/// or hash-derived ones after [`MockBackend::with_hashed_scores`]). Tokens
/// are whitespace units. Embeddings follow the same table → function →
/// hash-derived order. Unknown prompts generate the empty completion.
pub struct MockBackend {
    id: String,
    score_table: HashMap<(String, String), Vec<f64>>,
    scorer: Option<Arc<ScoreFn>>,
    hashed_scores: bool,
    embed_table: HashMap<String, Vec<f64>>,
    embedder: Option<Arc<EmbedFn>>,
    embed_dim: usize,
    completions: HashMap<String, String>,
    latency: Option<SimulatedLatency>,
    call_delay: Option<Duration>,
    limiter: InFlightLimiter,
    stats: MockStats,
}

impl std::fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockBackend")
            .field("id", &self.id)
            .field("score_table", &self.score_table.len())
            .field("embed_dim", &self.embed_dim)
            .finish_non_exhaustive()
    }
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl MockBackend {
    pub fn new() -> Self {
        Self {
            id: "mock".into(),
            score_table: HashMap::new(),
            scorer: None,
            hashed_scores: false,
            embed_table: HashMap::new(),
            embedder: None,
            embed_dim: DEFAULT_MOCK_DIM,
            completions: HashMap::new(),
            latency: None,
            call_delay: None,
            limiter: InFlightLimiter::new(usize::MAX),
            stats: MockStats::default(),
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_score(mut self, context: &str, continuation: &str, logprobs: Vec<f64>) -> Self {
        self.score_table
            .insert((context.to_string(), continuation.to_string()), logprobs);
        self
    }

    pub fn with_scorer(mut self, f: impl Fn(&str, &str) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.scorer = Some(Arc::new(f));
        self
    }

    pub fn with_hashed_scores(mut self) -> Self {
        self.hashed_scores = true;
        self
    }

    pub fn with_embedding(mut self, text: &str, values: Vec<f64>) -> Self {
        self.embed_table.insert(text.to_string(), values);
        self
    }

    pub fn with_embedder(mut self, f: impl Fn(&str) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.embedder = Some(Arc::new(f));
        self
    }

    pub fn with_embed_dim(mut self, dim: usize) -> Self {
        self.embed_dim = dim.max(1);
        self
    }

    pub fn with_completion(mut self, prompt: &str, completion: &str) -> Self {
        self.completions.insert(prompt.to_string(), completion.to_string());
        self
    }

    pub fn with_latency(mut self, latency: SimulatedLatency) -> Self {
        self.latency = Some(latency);
        self
    }

    /// Real sleep inside every request, for exercising concurrency limits.
    pub fn with_call_delay(mut self, delay: Duration) -> Self {
        self.call_delay = Some(delay);
        self
    }

    pub fn with_max_in_flight(mut self, max: usize) -> Self {
        self.limiter = InFlightLimiter::new(max);
        self
    }

    pub fn with_record(self, record: MockTableRecord) -> Self {
        match record {
            MockTableRecord::Score {
                context,
                continuation,
                logprobs,
            } => self.with_score(&context, &continuation, logprobs),
            MockTableRecord::Embed { text, values } => self.with_embedding(&text, values),
            MockTableRecord::Generate { prompt, completion } => self.with_completion(&prompt, &completion),
        }
    }

    /// Applies every record of a JSON-lines wiring file.
    pub fn with_table_file(mut self, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: MockTableRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: idx + 1,
                field: "<mock record>".into(),
                message: e.to_string(),
            })?;
            self = self.with_record(record);
        }
        Ok(self)
    }

    pub fn stats(&self) -> &MockStats {
        &self.stats
    }

    pub fn peak_in_flight(&self) -> usize {
        self.limiter.peak()
    }

    fn seeded_rng(parts: &[&str]) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        for p in parts {
            hasher.update((p.len() as u64).to_le_bytes());
            hasher.update(p.as_bytes());
        }
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    fn pause(&self) {
        if let Some(d) = self.call_delay {
            std::thread::sleep(d);
        }
    }
}

impl TokenCounter for MockBackend {
    fn count_tokens(&self, text: &str) -> Result<usize> {
        self.stats.count_calls.fetch_add(1, Ordering::SeqCst);
        Ok(whitespace_token_count(text))
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn score(&self, context: &str, continuation: &str) -> Result<LogProbSequence> {
        require_nonempty("continuation", continuation)?;
        let _permit = self.limiter.acquire();
        self.stats.score_calls.fetch_add(1, Ordering::SeqCst);
        self.pause();

        let words: Vec<String> = continuation.split_whitespace().map(str::to_string).collect();
        let key = (context.to_string(), continuation.to_string());
        let logprobs = if let Some(lp) = self.score_table.get(&key) {
            lp.clone()
        } else if let Some(f) = &self.scorer {
            f(context, continuation)
        } else if self.hashed_scores {
            let mut rng = Self::seeded_rng(&["score", context, continuation]);
            (0..words.len().max(1))
                .map(|_| rng.random_range(0.05f64..1.0).ln())
                .collect()
        } else {
            vec![0.0; words.len().max(1)]
        };
        let tokens = if words.len() == logprobs.len() {
            words
        } else {
            (0..logprobs.len()).map(|i| format!("<tok{i}>")).collect()
        };
        if tokens.is_empty() {
            return Err(Error::precondition("continuation has no tokens"));
        }
        LogProbSequence::continuation_only(tokens, logprobs)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        require_nonempty("text", text)?;
        let _permit = self.limiter.acquire();
        self.stats.embed_calls.fetch_add(1, Ordering::SeqCst);
        self.pause();

        let values = if let Some(v) = self.embed_table.get(text) {
            v.clone()
        } else if let Some(f) = &self.embedder {
            f(text)
        } else {
            let mut rng = Self::seeded_rng(&["embed", text]);
            (0..self.embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        if values.is_empty() {
            return Err(Error::MalformedResponse("empty embedding".into()));
        }
        Ok(EmbeddingVector {
            values,
            source_layer: 16,
            source_token: "EOS".into(),
            backend_id: self.id.clone(),
        })
    }

    fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String> {
        require_nonempty("prompt", prompt)?;
        let _permit = self.limiter.acquire();
        self.stats.generate_calls.fetch_add(1, Ordering::SeqCst);
        self.pause();

        let completion = self.completions.get(prompt).map(String::as_str).unwrap_or("");
        Ok(truncate_tokens(completion, max_new_tokens).to_string())
    }

    fn simulated_latency(&self, context: &str, continuation: &str) -> Option<Duration> {
        Some(match self.latency {
            Some(l) => {
                let tokens = whitespace_token_count(context) + whitespace_token_count(continuation);
                l.base + l.per_token * tokens as u32
            }
            None => Duration::ZERO,
        })
    }
}

/// Prefix of `text` ending with its `n`-th whitespace unit.
fn truncate_tokens(text: &str, n: usize) -> &str {
    if n == 0 {
        return "";
    }
    let mut seen = 0;
    let mut in_word = false;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if in_word {
                seen += 1;
                if seen == n {
                    return &text[..i];
                }
            }
            in_word = false;
        } else {
            in_word = true;
        }
    }
    text
}
