use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Completion, DecodeParams, GenerationRequest};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("rate limit still exceeded after {attempts} attempts")]
    RateLimitExhausted { attempts: u32 },
    #[error("no scripted completion for request fingerprint {fingerprint}")]
    FixtureMiss { fingerprint: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed response: {0}")]
    InvalidResponse(String),
    #[error("response cache: {0}")]
    Cache(String),
}

/// A chat-completion model behind some transport.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, request: &GenerationRequest) -> Result<Completion, BackendError>;
}

/// A named backend bound to a model id and decode parameters; what the
/// strategies and the regeneration pipeline hold.
#[derive(Clone)]
pub struct BackendHandle {
    pub name: String,
    pub model: String,
    pub params: DecodeParams,
    pub backend: Arc<dyn Backend>,
}

impl BackendHandle {
    pub fn new(name: impl Into<String>, model: impl Into<String>, backend: Arc<dyn Backend>) -> Self {
        BackendHandle {
            name: name.into(),
            model: model.into(),
            params: DecodeParams::default(),
            backend,
        }
    }

    pub fn with_params(mut self, params: DecodeParams) -> Self {
        self.params = params;
        self
    }

    pub fn request(&self, prompt: impl Into<String>) -> GenerationRequest {
        GenerationRequest {
            prompt: prompt.into(),
            params: self.params.clone(),
            model: self.model.clone(),
            backend: self.name.clone(),
        }
    }

    pub fn complete(&self, request: &GenerationRequest) -> Result<Completion, BackendError> {
        request.validate()?;
        self.backend.complete(request)
    }
}

impl std::fmt::Debug for BackendHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendHandle")
            .field("name", &self.name)
            .field("model", &self.model)
            .field("backend", &self.backend.id())
            .finish()
    }
}

/// Stand-in for a remote backend in offline runs: it never reaches the
/// network, so anything not already in the response cache is a miss.
pub struct CacheOnlyBackend {
    id: String,
}

impl CacheOnlyBackend {
    pub fn new(id: impl Into<String>) -> Self {
        CacheOnlyBackend { id: id.into() }
    }
}

impl Backend for CacheOnlyBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &GenerationRequest) -> Result<Completion, BackendError> {
        Err(BackendError::FixtureMiss { fingerprint: request.fingerprint().0 })
    }
}

pub(crate) fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis().try_into().unwrap_or(u64::MAX)
}
