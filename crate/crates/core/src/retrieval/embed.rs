use serde::{Deserialize, Serialize};

use super::{EmbeddingVector, RetrievalError};
use crate::llm::{OpenAiBackend, OpenAiConfig};

/// Maps text to a vector. The id names the embedding space; indexes refuse
/// queries from a different one.
pub trait Embedder: Send + Sync {
    fn id(&self) -> String;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, RetrievalError>;
}

/// Feature hashing of character n-grams into a fixed number of signed
/// buckets, L2-normalized.
///
/// Text is lowercased and whitespace runs collapse to one space before
/// n-grams are taken, with a space added at either end so short words still
/// produce boundary grams. Buckets and signs come from 64-bit FNV-1a.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    dim: usize,
    min_n: usize,
    max_n: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder::new(512)
    }
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        HashingEmbedder { dim: dim.max(1), min_n: 3, max_n: 5 }
    }

    pub fn with_ngrams(mut self, min_n: usize, max_n: usize) -> Self {
        self.min_n = min_n.max(1);
        self.max_n = max_n.max(self.min_n);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

impl Embedder for HashingEmbedder {
    fn id(&self) -> String {
        format!("hashing-char-ngram-v1/d{}/n{}-{}", self.dim, self.min_n, self.max_n)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, RetrievalError> {
        let normalized = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        if normalized.is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        let chars: Vec<char> = format!(" {normalized} ").chars().collect();
        let mut values = vec![0.0; self.dim];
        let mut gram = String::new();
        for n in self.min_n..=self.max_n {
            for window in chars.windows(n) {
                gram.clear();
                gram.extend(window);
                let hash = fnv1a(gram.as_bytes());
                let bucket = (hash % self.dim as u64) as usize;
                values[bucket] += if hash >> 63 == 1 { -1.0 } else { 1.0 };
            }
        }
        EmbeddingVector::new(values)?.normalized()
    }
}

/// Embeddings from an OpenAI-compatible `/embeddings` endpoint, used as
/// returned by the provider.
pub struct RemoteEmbedder {
    client: OpenAiBackend,
    model: String,
}

impl RemoteEmbedder {
    pub fn new(client: OpenAiBackend, model: impl Into<String>) -> Self {
        RemoteEmbedder { client, model: model.into() }
    }
}

impl Embedder for RemoteEmbedder {
    fn id(&self) -> String {
        format!("remote/{}", self.model)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, RetrievalError> {
        if text.trim().is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        EmbeddingVector::new(self.client.embed(&self.model, text)?)
    }
}

/// Embedder selection as written in an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EmbedderConfig {
    Hashing {
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Remote {
        base_url: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
    },
}

fn default_dim() -> usize {
    512
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Hashing { dim: default_dim() }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Box<dyn Embedder> {
        match self {
            EmbedderConfig::Hashing { dim } => Box::new(HashingEmbedder::new(*dim)),
            EmbedderConfig::Remote { base_url, model, api_key_env } => {
                let key = api_key_env.as_deref().and_then(|name| std::env::var(name).ok());
                let config = OpenAiConfig {
                    base_url: base_url.clone(),
                    max_retries: 4,
                    initial_backoff_ms: 500,
                    timeout_s: 120,
                };
                Box::new(RemoteEmbedder::new(OpenAiBackend::new("embedder", config, key), model.clone()))
            }
        }
    }
}
