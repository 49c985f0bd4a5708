use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::backend::elapsed_ms;
use super::{Backend, BackendError, Completion, GenerationRequest, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenAiConfig {
    /// Base URL up to and including the version segment, e.g.
    /// `https://api.openai.com/v1`.
    pub base_url: String,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub initial_backoff_ms: u64,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
}

fn default_retries() -> u32 {
    4
}

fn default_backoff_ms() -> u64 {
    500
}

fn default_timeout_s() -> u64 {
    120
}

/// Client for any OpenAI-compatible `/chat/completions` endpoint.
///
/// Transport failures, `429` and `5xx` responses are retried with
/// exponential backoff up to `max_retries` extra attempts; `401`/`403` fail
/// immediately.
pub struct OpenAiBackend {
    id: String,
    config: OpenAiConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl OpenAiBackend {
    pub fn new(id: impl Into<String>, config: OpenAiConfig, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_s)))
            .build()
            .into();
        OpenAiBackend { id: id.into(), config, api_key, agent }
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{path}", self.config.base_url.trim_end_matches('/'))
    }

    fn body(request: &GenerationRequest) -> Value {
        let mut body = json!({
            "model": request.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_tokens,
        });
        if let Some(seed) = request.params.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, url: &str, body: &Value) -> Attempt {
        let mut call = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = match call.send_json(body) {
            Ok(response) => response,
            Err(e) => return Attempt::Retry(BackendError::Transport(e.to_string())),
        };
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().unwrap_or_default();
        match status {
            200..=299 => match serde_json::from_str::<Value>(&text) {
                Ok(value) => Attempt::Done(Ok(value)),
                Err(e) => Attempt::Done(Err(BackendError::InvalidResponse(e.to_string()))),
            },
            401 | 403 => Attempt::Done(Err(BackendError::Auth(format!("HTTP {status}: {}", snippet(&text))))),
            429 => Attempt::RateLimited,
            500..=599 => Attempt::Retry(BackendError::Transport(format!("HTTP {status}: {}", snippet(&text)))),
            _ => Attempt::Done(Err(BackendError::InvalidResponse(format!("HTTP {status}: {}", snippet(&text))))),
        }
    }

    /// POSTs `body` to `{base_url}/{path}` with the retry policy.
    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let url = self.endpoint(path);
        let attempts = self.config.max_retries + 1;
        let mut last_error = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                let backoff = self.config.initial_backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            match self.attempt(&url, body) {
                Attempt::Done(result) => return result,
                Attempt::Retry(err) => {
                    tracing::warn!(backend = %self.id, attempt, error = %err, "retrying request");
                    last_error = Some(err);
                }
                Attempt::RateLimited => {
                    tracing::warn!(backend = %self.id, attempt, "rate limited");
                    last_error = None;
                }
            }
        }
        Err(last_error.unwrap_or(BackendError::RateLimitExhausted { attempts }))
    }

    /// Embeds `text` through the `/embeddings` endpoint.
    pub fn embed(&self, model: &str, text: &str) -> Result<Vec<f64>, BackendError> {
        let value = self.post("embeddings", &json!({ "model": model, "input": text }))?;
        value
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .and_then(|values| values.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
            .ok_or_else(|| BackendError::InvalidResponse("response has no numeric embedding".into()))
    }
}

enum Attempt {
    Done(Result<Value, BackendError>),
    Retry(BackendError),
    RateLimited,
}

fn snippet(text: &str) -> String {
    text.chars().take(200).collect()
}

fn parse_chat_response(value: &Value) -> Result<Completion, BackendError> {
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::InvalidResponse("response has no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::InvalidResponse("choice has no message content".into()))?;
    let finish_reason = choice.get("finish_reason").and_then(Value::as_str).unwrap_or("unknown");
    let usage = value.get("usage");
    let count = |key: &str| usage.and_then(|u| u.get(key)).and_then(Value::as_u64).unwrap_or(0);
    Ok(Completion {
        text: text.to_owned(),
        finish_reason: finish_reason.to_owned(),
        usage: Usage { prompt_tokens: count("prompt_tokens"), output_tokens: count("completion_tokens") },
        latency_ms: 0,
    })
}

impl Backend for OpenAiBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &GenerationRequest) -> Result<Completion, BackendError> {
        let start = Instant::now();
        let value = self.post("chat/completions", &Self::body(request))?;
        let mut completion = parse_chat_response(&value)?;
        completion.latency_ms = elapsed_ms(start);
        Ok(completion)
    }
}
