use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use log::warn;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{Backend, EmbeddingVector, LogProbSequence};
use crate::error::{Error, Result};
use crate::prompting::TokenCounter;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheRecord {
    key_hash: String,
    operation: String,
    payload: Value,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
}

/// Append-only JSON-lines response store keyed by
/// `sha256(backend_id, operation, inputs)`.
///
/// Lines that fail to parse (a torn final write) are skipped on load.
pub struct ResponseCache {
    path: PathBuf,
    entries: RwLock<HashMap<String, Value>>,
    writer: Mutex<File>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl ResponseCache {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for (idx, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(rec) => {
                        entries.insert(rec.key_hash, rec.payload);
                    }
                    Err(e) => warn!("{}:{}: skipping unreadable cache line: {e}", path.display(), idx + 1),
                }
            }
        }
        let writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            entries: RwLock::new(entries),
            writer: Mutex::new(writer),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    pub fn key(backend_id: &str, operation: &str, inputs: &Value) -> String {
        let canonical = json!([backend_id, operation, inputs]).to_string();
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::SeqCst),
            misses: self.misses.load(Ordering::SeqCst),
        }
    }

    fn get<T: DeserializeOwned>(&self, key: &str) -> Option<T> {
        let found = self
            .entries
            .read()
            .expect("cache poisoned")
            .get(key)
            .and_then(|v| serde_json::from_value(v.clone()).ok());
        if found.is_some() {
            self.hits.fetch_add(1, Ordering::SeqCst);
        } else {
            self.misses.fetch_add(1, Ordering::SeqCst);
        }
        found
    }

    fn put<T: Serialize>(&self, key: String, operation: &str, value: &T) -> Result<()> {
        let payload = serde_json::to_value(value).expect("cache payloads serialize");
        let record = CacheRecord {
            key_hash: key.clone(),
            operation: operation.to_string(),
            payload: payload.clone(),
        };
        {
            let mut w = self.writer.lock().expect("cache poisoned");
            let line = serde_json::to_string(&record).expect("cache records serialize");
            writeln!(w, "{line}").map_err(|e| Error::io(&self.path, e))?;
        }
        self.entries.write().expect("cache poisoned").insert(key, payload);
        Ok(())
    }

    fn through<T, F>(&self, backend_id: &str, operation: &str, inputs: Value, compute: F) -> Result<T>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T>,
    {
        let key = Self::key(backend_id, operation, &inputs);
        if let Some(hit) = self.get(&key) {
            return Ok(hit);
        }
        let value = compute()?;
        self.put(key, operation, &value)?;
        Ok(value)
    }
}

/// Wraps a backend with a [`ResponseCache`]. Scores, embeddings and greedy
/// completions are cached; token counts always go to the inner backend.
pub struct CachedBackend<B> {
    inner: B,
    cache: ResponseCache,
}

impl<B: Backend> CachedBackend<B> {
    pub fn new(inner: B, cache: ResponseCache) -> Self {
        Self { inner, cache }
    }

    pub fn open(inner: B, path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(inner, ResponseCache::open(path)?))
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }
}

impl<B: Backend> TokenCounter for CachedBackend<B> {
    fn count_tokens(&self, text: &str) -> Result<usize> {
        self.inner.count_tokens(text)
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn score(&self, context: &str, continuation: &str) -> Result<LogProbSequence> {
        super::require_nonempty("continuation", continuation)?;
        let seq: LogProbSequence = self.cache.through(
            self.inner.id(),
            "score",
            json!({"context": context, "continuation": continuation}),
            || self.inner.score(context, continuation),
        )?;
        seq.validate()?;
        Ok(seq)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        super::require_nonempty("text", text)?;
        self.cache
            .through(self.inner.id(), "embed", json!({"text": text}), || self.inner.embed(text))
    }

    fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String> {
        super::require_nonempty("prompt", prompt)?;
        self.cache.through(
            self.inner.id(),
            "generate",
            json!({"prompt": prompt, "max_new_tokens": max_new_tokens}),
            || self.inner.generate(prompt, max_new_tokens),
        )
    }

    fn simulated_latency(&self, context: &str, continuation: &str) -> Option<Duration> {
        self.inner.simulated_latency(context, continuation)
    }
}
