//! Chat-completion and embedding client.
//!
//! [`LlmClient`] wraps a [`Backend`] with bounded concurrency, exponential
//! backoff retries and embedding normalization. Backends are selected from
//! the endpoint URL: `mock:` for the offline deterministic backend,
//! `http(s)://` for an OpenAI-compatible server.

mod http;
mod mock;

use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use crate::corpus::{RegexTokenCounter, TokenCounter};

pub use http::HttpBackend;
pub use mock::{MockBackend, MockKind, SOURCE_LABEL};

pub const DEFAULT_RETRY_LIMIT: u32 = 5;
const MAX_RETRY_LIMIT: u32 = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub endpoint_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_token_env: Option<String>,
    #[serde(skip)]
    pub auth_token: Option<String>,
    pub max_in_flight: usize,
    pub retry_limit: u32,
    pub base_backoff_ms: u64,
    pub timeout_ms: u64,
    pub max_new_tokens: u32,
    pub temperature: f32,
    pub embed_batch_size: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint_url: "mock:agent?seed=0".into(),
            model_name: "mock".into(),
            auth_token_env: None,
            auth_token: None,
            max_in_flight: 4,
            retry_limit: DEFAULT_RETRY_LIMIT,
            base_backoff_ms: 200,
            timeout_ms: 60_000,
            max_new_tokens: 512,
            temperature: 0.0,
            embed_batch_size: 32,
        }
    }
}

impl BackendConfig {
    pub fn mock(spec: &str) -> Self {
        BackendConfig { endpoint_url: format!("mock:{spec}"), base_backoff_ms: 1, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        let bad = |m: &str| Err(LlmError::InvalidConfig(m.to_string()));
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1");
        }
        if self.retry_limit > MAX_RETRY_LIMIT {
            return bad("retry_limit must not exceed 20");
        }
        if self.embed_batch_size == 0 {
            return bad("embed_batch_size must be at least 1");
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return bad("temperature must be non-negative");
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be positive");
        }
        let url = self.endpoint_url.as_str();
        if !(url.starts_with("mock:") || url.starts_with("http://") || url.starts_with("https://")) {
            return bad("endpoint_url must start with mock:, http:// or https://");
        }
        Ok(())
    }

    /// Fills `auth_token` from the configured environment variable, if any.
    pub fn resolve_secrets(&mut self) {
        if let Some(var) = &self.auth_token_env {
            self.auth_token = std::env::var(var).ok();
        }
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << (attempt.saturating_sub(1)).min(16);
        Duration::from_millis(self.base_backoff_ms.saturating_mul(factor))
    }
}

/// What a chat request is for. Not sent over the wire; lets the offline
/// mock answer in the right shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    #[default]
    Generic,
    QuestionGeneration,
    AnswerGeneration,
    MultipleChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub max_new_tokens: u32,
    pub temperature: f32,
    #[serde(skip)]
    pub purpose: Purpose,
}

impl ChatRequest {
    pub fn new(system_prompt: impl Into<String>, user_prompt: impl Into<String>) -> Self {
        ChatRequest {
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            max_new_tokens: 512,
            temperature: 0.0,
            purpose: Purpose::Generic,
        }
    }

    pub fn with_purpose(mut self, purpose: Purpose) -> Self {
        self.purpose = purpose;
        self
    }

    pub fn with_decoding(mut self, max_new_tokens: u32, temperature: f32) -> Self {
        self.max_new_tokens = max_new_tokens;
        self.temperature = temperature;
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// A backend's answer to one chat call.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub system_prompt: String,
    pub user_prompt: String,
    pub max_new_tokens: u32,
    pub temperature: f32,
    pub response_text: String,
    pub usage: Usage,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("backend returned status {status}: {message}")]
    Permanent { status: u16, message: String },
    #[error("could not decode backend response: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LlmError {
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("permanent failure (status {status}): {message}")]
    Permanent { status: u16, message: String },
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("embedding input list is empty")]
    EmptyInput,
    #[error("embedding {index} has dimension {got}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, got: usize },
    #[error("embedding {index} is the zero vector and cannot be normalized")]
    ZeroVector { index: usize },
    #[error("backend returned {got} embeddings for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
}

impl LlmError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, LlmError::RetriesExhausted { .. })
    }
}

/// A chat and/or embedding provider.
pub trait Backend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<Completion, BackendError>;

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        let _ = texts;
        Err(BackendError::Permanent { status: 501, message: "backend does not support embeddings".into() })
    }

    /// Input budget of the embedding model, in default-counter tokens.
    fn embed_token_limit(&self) -> Option<usize> {
        None
    }
}

/// Unit-normalized embeddings plus the indices of inputs that were
/// truncated to fit the embedder's budget.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub vectors: Vec<Vec<f32>>,
    pub truncated: Vec<usize>,
}

impl Embeddings {
    pub fn dim(&self) -> Option<usize> {
        self.vectors.first().map(Vec::len)
    }
}

/// Counting semaphore bounding concurrent backend calls.
struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Limiter { max, in_flight: Mutex::new(0), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock();
        while *n >= self.max {
            self.cv.wait(&mut n);
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock();
        *n -= 1;
        self.0.cv.notify_one();
    }
}

/// Shareable client; clone the `Arc` to use it from several threads.
pub struct LlmClient {
    config: BackendConfig,
    backend: Arc<dyn Backend>,
    limiter: Limiter,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient").field("config", &self.config).finish_non_exhaustive()
    }
}

impl LlmClient {
    /// Builds the backend named by `config.endpoint_url`.
    pub fn from_config(config: BackendConfig) -> Result<Self, LlmError> {
        config.validate()?;
        let backend: Arc<dyn Backend> = match config.endpoint_url.strip_prefix("mock:") {
            Some(spec) => Arc::new(MockBackend::parse(spec).map_err(LlmError::InvalidConfig)?),
            None => Arc::new(HttpBackend::new(&config).map_err(LlmError::InvalidConfig)?),
        };
        Ok(Self::with_backend(config, backend))
    }

    pub fn with_backend(config: BackendConfig, backend: Arc<dyn Backend>) -> Self {
        let limiter = Limiter::new(config.max_in_flight.max(1));
        LlmClient { config, backend, limiter }
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn call<T>(&self, mut op: impl FnMut() -> Result<T, BackendError>) -> Result<(T, u32), LlmError> {
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.limiter.acquire();
                op()
            };
            match result {
                Ok(v) => return Ok((v, attempt)),
                Err(BackendError::Transient(msg)) => {
                    if attempt > self.config.retry_limit {
                        return Err(LlmError::RetriesExhausted { attempts: attempt, last: msg });
                    }
                    log::debug!("transient failure on attempt {attempt}: {msg}");
                    std::thread::sleep(self.config.backoff(attempt));
                }
                Err(BackendError::Permanent { status, message }) => {
                    return Err(LlmError::Permanent { status, message })
                }
                Err(BackendError::Decode(msg)) => return Err(LlmError::Decode(msg)),
            }
        }
    }

    pub fn chat(&self, request: &ChatRequest) -> Result<ChatExchange, LlmError> {
        let (completion, attempts) = self.call(|| self.backend.chat(request))?;
        Ok(ChatExchange {
            system_prompt: request.system_prompt.clone(),
            user_prompt: request.user_prompt.clone(),
            max_new_tokens: request.max_new_tokens,
            temperature: request.temperature,
            response_text: completion.text,
            usage: completion.usage,
            attempts,
        })
    }

    /// Request prefilled with this client's decoding defaults.
    pub fn request(&self, system: impl Into<String>, user: impl Into<String>, purpose: Purpose) -> ChatRequest {
        ChatRequest::new(system, user)
            .with_decoding(self.config.max_new_tokens, self.config.temperature)
            .with_purpose(purpose)
    }

    /// Embeds `texts`, truncating over-budget inputs, and normalizes every
    /// vector to unit length.
    pub fn embed(&self, texts: &[String]) -> Result<Embeddings, LlmError> {
        if texts.is_empty() {
            return Err(LlmError::EmptyInput);
        }
        let limit = self.backend.embed_token_limit();
        let mut truncated = Vec::new();
        let inputs: Vec<String> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| match limit.and_then(|l| truncate_tokens(t, l)) {
                Some(cut) => {
                    truncated.push(i);
                    cut
                }
                None => t.clone(),
            })
            .collect();

        let mut vectors = Vec::with_capacity(inputs.len());
        for batch in inputs.chunks(self.config.embed_batch_size) {
            let (raw, _) = self.call(|| self.backend.embed(batch))?;
            if raw.len() != batch.len() {
                return Err(LlmError::CountMismatch { expected: batch.len(), got: raw.len() });
            }
            vectors.extend(raw);
        }

        let dim = vectors[0].len();
        for (index, v) in vectors.iter_mut().enumerate() {
            if v.len() != dim {
                return Err(LlmError::DimensionMismatch { index, expected: dim, got: v.len() });
            }
            if !normalize(v) {
                return Err(LlmError::ZeroVector { index });
            }
        }
        Ok(Embeddings { vectors, truncated })
    }

    pub fn embed_one(&self, text: &str) -> Result<Vec<f32>, LlmError> {
        Ok(self.embed(&[text.to_string()])?.vectors.remove(0))
    }
}

/// Scales `v` to unit L2 norm in place. Returns false for zero or
/// non-finite vectors.
pub fn normalize(v: &mut [f32]) -> bool {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return false;
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
    true
}

/// Cuts `text` after `limit` tokens; `None` when it already fits.
fn truncate_tokens(text: &str, limit: usize) -> Option<String> {
    let spans = RegexTokenCounter.token_spans(text);
    if spans.len() <= limit {
        return None;
    }
    let end = if limit == 0 { 0 } else { spans[limit - 1].end };
    Some(text[..end].to_string())
}

/// Timestamped attempt log, handy for asserting retry spacing.
#[derive(Debug, Default)]
pub struct AttemptLog(Mutex<Vec<Instant>>);

impl AttemptLog {
    pub fn record(&self) {
        self.0.lock().push(Instant::now());
    }
    pub fn times(&self) -> Vec<Instant> {
        self.0.lock().clone()
    }
}
