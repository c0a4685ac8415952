use std::time::Duration;

use log::{debug, warn};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::limiter::InFlightLimiter;
use super::{require_nonempty, Backend, BackendConfig, EmbeddingVector, LogProbSequence};
use crate::error::{Error, Result};
use crate::prompting::TokenCounter;

const COMPLETIONS: &str = "/v1/completions";
const EMBEDDINGS: &str = "/v1/embeddings";
const TOKENIZE: &str = "/tokenize";

/// How continuation log-probabilities are located in an echoed prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// One echo request on `context + continuation`; the split point comes
    /// from the returned character offsets.
    Echo,
    /// Echo the context alone to learn its token count, then echo the full
    /// text. For servers that omit `text_offset`.
    TwoCall,
}

/// Client for an OpenAI-compatible completion server (vLLM and friends).
pub struct HttpBackend {
    config: BackendConfig,
    client: Client,
    limiter: InFlightLimiter,
    id: String,
}

struct EchoedTokens {
    tokens: Vec<String>,
    logprobs: Vec<Option<f64>>,
    offsets: Option<Vec<usize>>,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self> {
        config.validate()?;
        let client = Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            id: format!("http:{}", config.model_name),
            limiter: InFlightLimiter::new(config.max_in_flight),
            client,
            config,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn peak_in_flight(&self) -> usize {
        self.limiter.peak()
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    /// POSTs `body`, retrying transport failures, 429 and 5xx with
    /// exponential backoff. 404/405/501 mean the endpoint is missing.
    fn post(&self, path: &str, body: &Value) -> Result<Value> {
        let url = self.url(path);
        let mut attempt = 0u32;
        loop {
            let outcome = {
                let _permit = self.limiter.acquire();
                let mut req = self.client.post(&url).json(body);
                if let Some(key) = &self.config.api_key {
                    req = req.bearer_auth(key);
                }
                req.send()
            };
            let retryable_msg = match outcome {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let text = resp
                            .text()
                            .map_err(|e| Error::MalformedResponse(format!("{url}: {e}")))?;
                        return serde_json::from_str(&text)
                            .map_err(|e| Error::MalformedResponse(format!("{url}: {e}")));
                    }
                    if matches!(
                        status,
                        StatusCode::NOT_FOUND | StatusCode::METHOD_NOT_ALLOWED | StatusCode::NOT_IMPLEMENTED
                    ) {
                        return Err(Error::Capability(format!("{url} returned {status}")));
                    }
                    let detail = resp.text().unwrap_or_default();
                    if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
                        format!("{url} returned {status}: {detail}")
                    } else {
                        return Err(Error::Backend {
                            message: format!("{url} returned {status}: {detail}"),
                            retryable: false,
                        });
                    }
                }
                Err(e) => format!("{url}: {e}"),
            };
            if attempt >= self.config.max_retries {
                return Err(Error::Backend {
                    message: format!("{retryable_msg} (after {} attempts)", attempt + 1),
                    retryable: true,
                });
            }
            let backoff = Duration::from_millis(200) * 2u32.pow(attempt);
            warn!("retrying after {backoff:?}: {retryable_msg}");
            std::thread::sleep(backoff);
            attempt += 1;
        }
    }

    fn echo(&self, text: &str) -> Result<EchoedTokens> {
        let body = json!({
            "model": self.config.model_name,
            "prompt": text,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 1,
            "temperature": 0.0,
        });
        let resp = self.post(COMPLETIONS, &body)?;
        let logprobs = resp
            .pointer("/choices/0/logprobs")
            .filter(|v| !v.is_null())
            .ok_or_else(|| Error::Capability("completion response carries no logprobs".into()))?;
        let tokens: Vec<String> = serde_json::from_value(logprobs.get("tokens").cloned().unwrap_or(Value::Null))
            .map_err(|e| Error::MalformedResponse(format!("logprobs.tokens: {e}")))?;
        let token_logprobs: Vec<Option<f64>> =
            serde_json::from_value(logprobs.get("token_logprobs").cloned().unwrap_or(Value::Null))
                .map_err(|e| Error::MalformedResponse(format!("logprobs.token_logprobs: {e}")))?;
        let offsets: Option<Vec<usize>> = match logprobs.get("text_offset") {
            None | Some(Value::Null) => None,
            Some(v) => Some(
                serde_json::from_value(v.clone())
                    .map_err(|e| Error::MalformedResponse(format!("logprobs.text_offset: {e}")))?,
            ),
        };
        if tokens.len() != token_logprobs.len() || offsets.as_ref().is_some_and(|o| o.len() != tokens.len()) {
            return Err(Error::MalformedResponse("logprob arrays differ in length".into()));
        }
        Ok(EchoedTokens {
            tokens,
            logprobs: token_logprobs,
            offsets,
        })
    }

    /// Drops tokens without a conditional log-probability (the first echoed
    /// token) and marks everything from `split` on as continuation.
    fn assemble(echoed: EchoedTokens, split: usize) -> Result<LogProbSequence> {
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        let mut continuation_len = 0;
        for (i, (tok, lp)) in echoed.tokens.into_iter().zip(echoed.logprobs).enumerate() {
            let Some(lp) = lp else { continue };
            tokens.push(tok);
            logprobs.push(lp);
            if i >= split {
                continuation_len += 1;
            }
        }
        if continuation_len == 0 {
            return Err(Error::MalformedResponse("no scorable continuation tokens".into()));
        }
        LogProbSequence::new(tokens, logprobs, continuation_len)
    }
}

impl TokenCounter for HttpBackend {
    fn count_tokens(&self, text: &str) -> Result<usize> {
        if text.is_empty() {
            return Ok(0);
        }
        let resp = self.post(TOKENIZE, &json!({"model": self.config.model_name, "prompt": text}))?;
        if let Some(n) = resp.get("count").and_then(Value::as_u64) {
            return Ok(n as usize);
        }
        resp.get("tokens")
            .and_then(Value::as_array)
            .map(Vec::len)
            .ok_or_else(|| Error::MalformedResponse("tokenize response has neither count nor tokens".into()))
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn score(&self, context: &str, continuation: &str) -> Result<LogProbSequence> {
        require_nonempty("continuation", continuation)?;
        let full = format!("{context}{continuation}");
        let mode = self.config.score_mode;
        let echoed = self.echo(&full)?;
        let split = match (mode, &echoed.offsets) {
            (ScoreMode::Echo, Some(offsets)) => {
                let boundary = context.chars().count();
                offsets.iter().position(|&o| o >= boundary).unwrap_or(offsets.len())
            }
            _ => {
                if mode == ScoreMode::Echo {
                    debug!("server omitted text_offset; falling back to two-call scoring");
                }
                if context.is_empty() {
                    0
                } else {
                    self.echo(context)?.tokens.len()
                }
            }
        };
        Self::assemble(echoed, split)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        require_nonempty("text", text)?;
        let resp = self.post(EMBEDDINGS, &json!({"model": self.config.model_name, "input": text}))?;
        let values: Vec<f64> = resp
            .pointer("/data/0/embedding")
            .cloned()
            .ok_or_else(|| Error::MalformedResponse("embedding response has no data[0].embedding".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::MalformedResponse(e.to_string())))?;
        if values.is_empty() {
            return Err(Error::MalformedResponse("empty embedding".into()));
        }
        Ok(EmbeddingVector {
            values,
            source_layer: self.config.embedding_layer,
            source_token: self.config.embedding_token.clone(),
            backend_id: self.id.clone(),
        })
    }

    fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String> {
        require_nonempty("prompt", prompt)?;
        let body = json!({
            "model": self.config.model_name,
            "prompt": prompt,
            "max_tokens": max_new_tokens,
            "temperature": 0.0,
        });
        let resp = self.post(COMPLETIONS, &body)?;
        resp.pointer("/choices/0/text")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::MalformedResponse("completion response has no choices[0].text".into()))
    }
}
