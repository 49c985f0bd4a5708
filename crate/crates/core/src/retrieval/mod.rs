//! Exemplar retrieval: embed essays, then find the scored training essays
//! nearest to a query by cosine similarity.
//!
//! The index is an exact scan. Results come back in descending similarity
//! with ties broken by ascending essay id, and the query's own id is never
//! returned.

mod embed;
mod index;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::BackendError;

pub use embed::{Embedder, EmbedderConfig, HashingEmbedder, RemoteEmbedder};
pub use index::{Hit, IndexEntry, RetrievalIndex, INDEX_FORMAT_VERSION};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("vector has {found} dimensions, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("vector contains a non-finite value")]
    NonFinite,
    #[error("essay `{0}` has no gold overall band and cannot be an exemplar")]
    MissingGoldBand(String),
    #[error("essay id `{0}` appears twice in the index")]
    DuplicateId(String),
    #[error("index was built with embedder `{index}` but `{requested}` was requested")]
    EmbedderMismatch { index: String, requested: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// A dense embedding with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, RetrievalError> {
        if values.is_empty() {
            return Err(RetrievalError::DimensionMismatch { expected: 1, found: 0 });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite);
        }
        Ok(EmbeddingVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Scales to unit length; a zero vector is an error.
    pub fn normalized(mut self) -> Result<Self, RetrievalError> {
        let norm = self.norm();
        if norm == 0.0 {
            return Err(RetrievalError::ZeroVector);
        }
        self.0.iter_mut().for_each(|v| *v /= norm);
        Ok(self)
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = RetrievalError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        EmbeddingVector::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(vector: EmbeddingVector) -> Self {
        vector.0
    }
}

/// Cosine similarity, clamped to `[-1, 1]` against rounding.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, RetrievalError> {
    if a.dim() != b.dim() {
        return Err(RetrievalError::DimensionMismatch { expected: a.dim(), found: b.dim() });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
