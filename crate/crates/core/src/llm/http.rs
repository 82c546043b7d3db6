//! OpenAI-compatible HTTP backend (`/chat/completions`, `/embeddings`).

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendConfig, BackendError, ChatRequest, Completion, Usage};

pub struct HttpBackend {
    base_url: String,
    model: String,
    token: Option<String>,
    client: Client,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend").field("base_url", &self.base_url).field("model", &self.model).finish()
    }
}

#[derive(Serialize)]
struct Message<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: Vec<Message<'a>>,
    max_tokens: u32,
    temperature: f32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Serialize)]
struct EmbedBody<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f32>,
}

impl HttpBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, String> {
        let client = Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| format!("cannot build HTTP client: {e}"))?;
        Ok(HttpBackend {
            base_url: config.endpoint_url.trim_end_matches('/').to_string(),
            model: config.model_name.clone(),
            token: config.auth_token.clone(),
            client,
        })
    }

    fn post<B: Serialize>(&self, path: &str, body: &B) -> Result<String, BackendError> {
        let mut req = self.client.post(format!("{}/{path}", self.base_url)).json(body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transient(e.to_string()))?;
        if status.is_success() {
            Ok(text)
        } else if is_transient(status) {
            Err(BackendError::Transient(format!("status {status}: {}", snippet(&text))))
        } else {
            Err(BackendError::Permanent { status: status.as_u16(), message: snippet(&text) })
        }
    }
}

fn is_transient(status: StatusCode) -> bool {
    status == StatusCode::TOO_MANY_REQUESTS || status == StatusCode::REQUEST_TIMEOUT || status.is_server_error()
}

fn snippet(s: &str) -> String {
    s.chars().take(200).collect()
}

impl Backend for HttpBackend {
    fn chat(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        let mut messages = Vec::with_capacity(2);
        if !request.system_prompt.is_empty() {
            messages.push(Message { role: "system", content: &request.system_prompt });
        }
        messages.push(Message { role: "user", content: &request.user_prompt });
        let body = ChatBody {
            model: &self.model,
            messages,
            max_tokens: request.max_new_tokens,
            temperature: request.temperature,
        };
        let raw = self.post("chat/completions", &body)?;
        let parsed: ChatResponse = serde_json::from_str(&raw).map_err(|e| BackendError::Decode(e.to_string()))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Decode("response has no choices[0].message.content".into()))?;
        let usage = parsed
            .usage
            .map(|u| Usage { prompt_tokens: u.prompt_tokens, completion_tokens: u.completion_tokens })
            .unwrap_or_default();
        Ok(Completion { text, usage })
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        let raw = self.post("embeddings", &EmbedBody { model: &self.model, input: texts })?;
        let mut parsed: EmbedResponse = serde_json::from_str(&raw).map_err(|e| BackendError::Decode(e.to_string()))?;
        if parsed.data.iter().all(|d| d.index.is_some()) {
            parsed.data.sort_by_key(|d| d.index);
        }
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}
