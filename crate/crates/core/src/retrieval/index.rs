use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{cosine, Embedder, EmbeddingVector, RetrievalError};
use crate::dataset::{DatasetSplit, Essay};

pub const INDEX_FORMAT_VERSION: u32 = 1;
const FORMAT_NAME: &str = "ielts-aes-index";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub vector: EmbeddingVector,
}

/// A retrieved exemplar id and its cosine similarity to the query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub similarity: f64,
}

/// Immutable exact-scan index over scored essays.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    embedder_id: String,
    dim: usize,
    built_at: u64,
    entries: Vec<IndexEntry>,
    corpus: BTreeMap<String, Essay>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    embedder: String,
    dim: usize,
    count: usize,
    built_at: u64,
}

#[derive(Serialize, Deserialize)]
struct Line {
    id: String,
    vector: EmbeddingVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    essay: Option<Essay>,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RetrievalIndex {
    /// Index over raw vectors, with no essays attached. Ids must be unique
    /// and every vector must share one dimension.
    pub fn from_entries(embedder_id: impl Into<String>, entries: Vec<IndexEntry>) -> Result<Self, RetrievalError> {
        let dim = entries.first().map_or(0, |e| e.vector.dim());
        let mut seen = HashSet::new();
        for entry in &entries {
            if entry.vector.dim() != dim {
                return Err(RetrievalError::DimensionMismatch { expected: dim, found: entry.vector.dim() });
            }
            if entry.vector.norm() == 0.0 {
                return Err(RetrievalError::ZeroVector);
            }
            if !seen.insert(entry.id.as_str()) {
                return Err(RetrievalError::DuplicateId(entry.id.clone()));
            }
        }
        Ok(RetrievalIndex {
            embedder_id: embedder_id.into(),
            dim,
            built_at: now_unix(),
            entries,
            corpus: BTreeMap::new(),
        })
    }

    /// Embeds every essay of `corpus`, which must all carry a gold band.
    pub fn build(corpus: &DatasetSplit, embedder: &dyn Embedder) -> Result<Self, RetrievalError> {
        if let Some(unscored) = corpus.essays().iter().find(|e| e.overall.is_none()) {
            return Err(RetrievalError::MissingGoldBand(unscored.id.clone()));
        }
        let entries = corpus
            .essays()
            .iter()
            .map(|essay| {
                Ok(IndexEntry { id: essay.id.clone(), vector: embedder.embed(&essay.retrieval_text())? })
            })
            .collect::<Result<Vec<_>, RetrievalError>>()?;
        let mut index = RetrievalIndex::from_entries(embedder.id(), entries)?;
        index.corpus = corpus.essays().iter().map(|e| (e.id.clone(), e.clone())).collect();
        Ok(index)
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Build time in seconds since the Unix epoch.
    pub fn built_at(&self) -> u64 {
        self.built_at
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn essay(&self, id: &str) -> Option<&Essay> {
        self.corpus.get(id)
    }

    /// The `k` entries nearest to `query`, skipping `exclude_id`.
    pub fn search(
        &self,
        query: &EmbeddingVector,
        exclude_id: Option<&str>,
        k: usize,
    ) -> Result<Vec<Hit>, RetrievalError> {
        if k == 0 {
            return Ok(Vec::new());
        }
        if !self.entries.is_empty() && query.dim() != self.dim {
            return Err(RetrievalError::DimensionMismatch { expected: self.dim, found: query.dim() });
        }
        let mut scored = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| Some(e.id.as_str()) != exclude_id)
            .map(|(i, e)| Ok((i, cosine(query, &e.vector)?)))
            .collect::<Result<Vec<_>, RetrievalError>>()?;
        // Similarity descending, then id ascending: a total order, so partial
        // selection followed by sorting the prefix equals a full sort.
        let order = |a: &(usize, f64), b: &(usize, f64)| {
            b.1.total_cmp(&a.1).then_with(|| self.entries[a.0].id.cmp(&self.entries[b.0].id))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(scored.into_iter().map(|(i, similarity)| Hit { id: self.entries[i].id.clone(), similarity }).collect())
    }

    /// Top-`k` exemplars for `query`, embedded from its prompt and essay
    /// text. The query's own id is never returned.
    pub fn retrieve(&self, query: &Essay, embedder: &dyn Embedder, k: usize) -> Result<Vec<Hit>, RetrievalError> {
        let requested = embedder.id();
        if requested != self.embedder_id {
            return Err(RetrievalError::EmbedderMismatch { index: self.embedder_id.clone(), requested });
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        self.search(&embedder.embed(&query.retrieval_text())?, Some(&query.id), k)
    }

    /// Writes a header line followed by one JSON line per entry.
    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let io = |source| RetrievalError::Io { path: path.display().to_string(), source };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        let header = Header {
            format: FORMAT_NAME.into(),
            version: INDEX_FORMAT_VERSION,
            embedder: self.embedder_id.clone(),
            dim: self.dim,
            count: self.entries.len(),
            built_at: self.built_at,
        };
        writeln!(out, "{}", to_line(&header)).map_err(io)?;
        for entry in &self.entries {
            let line = Line { id: entry.id.clone(), vector: entry.vector.clone(), essay: self.corpus.get(&entry.id).cloned() };
            writeln!(out, "{}", to_line(&line)).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    /// Loads an index written by [`save`](Self::save), refusing one built
    /// with a different embedder.
    pub fn load(path: &Path, embedder_id: &str) -> Result<Self, RetrievalError> {
        let name = path.display().to_string();
        let format = |message: String| RetrievalError::Format { path: name.clone(), message };
        let file = File::open(path).map_err(|source| RetrievalError::Io { path: name.clone(), source })?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| format("empty index file".into()))?
            .map_err(|source| RetrievalError::Io { path: name.clone(), source })?;
        let header: Header = serde_json::from_str(&header_line).map_err(|e| format(format!("header: {e}")))?;
        if header.format != FORMAT_NAME || header.version != INDEX_FORMAT_VERSION {
            return Err(format(format!("unsupported index format {} v{}", header.format, header.version)));
        }
        if header.embedder != embedder_id {
            return Err(RetrievalError::EmbedderMismatch { index: header.embedder, requested: embedder_id.into() });
        }
        let mut entries = Vec::with_capacity(header.count);
        let mut corpus = BTreeMap::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|source| RetrievalError::Io { path: name.clone(), source })?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line).map_err(|e| format(format!("line {}: {e}", n + 2)))?;
            if let Some(essay) = parsed.essay {
                corpus.insert(parsed.id.clone(), essay);
            }
            entries.push(IndexEntry { id: parsed.id, vector: parsed.vector });
        }
        if entries.len() != header.count {
            return Err(format(format!("header declares {} entries, found {}", header.count, entries.len())));
        }
        let mut index = RetrievalIndex::from_entries(header.embedder, entries)?;
        if !index.entries.is_empty() && index.dim != header.dim {
            return Err(RetrievalError::DimensionMismatch { expected: header.dim, found: index.dim });
        }
        index.dim = header.dim;
        index.built_at = header.built_at;
        index.corpus = corpus;
        Ok(index)
    }
}

fn to_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("index records serialize")
}
