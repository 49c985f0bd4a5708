use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, Completion, Fingerprint, GenerationRequest};

/// One cached exchange: the request that produced it and the completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub fingerprint: Fingerprint,
    pub request: GenerationRequest,
    pub completion: Completion,
}

/// On-disk response cache: `<dir>/<backend>/<fingerprint>.json`.
///
/// Reads may happen concurrently; writes are serialized and land through a
/// rename so a killed run never leaves a truncated entry behind.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ResponseCache { dir: dir.into(), write_lock: Mutex::new(()) }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry_path(&self, backend: &str, fingerprint: &Fingerprint) -> PathBuf {
        self.dir.join(sanitize(backend)).join(format!("{fingerprint}.json"))
    }

    pub fn get(&self, backend: &str, fingerprint: &Fingerprint) -> Option<CacheEntry> {
        let bytes = fs::read(self.entry_path(backend, fingerprint)).ok()?;
        let entry: CacheEntry = serde_json::from_slice(&bytes).ok()?;
        (entry.fingerprint == *fingerprint).then_some(entry)
    }

    pub fn put(&self, backend: &str, entry: &CacheEntry) -> Result<(), BackendError> {
        let path = self.entry_path(backend, &entry.fingerprint);
        let parent = path.parent().expect("entry path has a parent");
        let _guard = self.write_lock.lock().expect("cache lock poisoned");
        fs::create_dir_all(parent).map_err(|e| BackendError::Cache(format!("{}: {e}", parent.display())))?;
        let tmp = path.with_extension("json.tmp");
        let bytes = serde_json::to_vec_pretty(entry).map_err(|e| BackendError::Cache(e.to_string()))?;
        let mut file = fs::File::create(&tmp).map_err(|e| BackendError::Cache(format!("{}: {e}", tmp.display())))?;
        file.write_all(&bytes)
            .and_then(|_| file.sync_all())
            .map_err(|e| BackendError::Cache(e.to_string()))?;
        fs::rename(&tmp, &path).map_err(|e| BackendError::Cache(e.to_string()))
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

/// Serves completions from a [`ResponseCache`] and only forwards misses to
/// the wrapped backend. Failed calls are never cached.
pub struct CachedBackend {
    inner: Arc<dyn Backend>,
    cache: Arc<ResponseCache>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl CachedBackend {
    pub fn new(inner: Arc<dyn Backend>, cache: Arc<ResponseCache>) -> Self {
        CachedBackend { inner, cache, hits: AtomicUsize::new(0), misses: AtomicUsize::new(0) }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }
}

impl Backend for CachedBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &GenerationRequest) -> Result<Completion, BackendError> {
        let fingerprint = request.fingerprint();
        if let Some(entry) = self.cache.get(&request.backend, &fingerprint) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(entry.completion);
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let completion = self.inner.complete(request)?;
        self.cache.put(
            &request.backend,
            &CacheEntry { fingerprint, request: request.clone(), completion: completion.clone() },
        )?;
        Ok(completion)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{DecodeParams, ScriptedBackend};

    #[test]
    fn second_call_is_served_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let scripted = Arc::new(ScriptedBackend::new("s").with_pattern(".", "7.0").unwrap());
        let cache = Arc::new(ResponseCache::new(dir.path()));
        let cached = CachedBackend::new(scripted.clone(), cache.clone());
        let request = GenerationRequest {
            prompt: "score this".into(),
            params: DecodeParams::default(),
            model: "m".into(),
            backend: "primary/one".into(),
        };
        let first = cached.complete(&request).unwrap();
        let second = cached.complete(&request).unwrap();
        assert_eq!(first, second);
        assert_eq!(scripted.calls(), 1);
        assert_eq!((cached.hits(), cached.misses()), (1, 1));

        // A fresh wrapper over the same directory still hits.
        let again = CachedBackend::new(scripted.clone(), cache);
        again.complete(&request).unwrap();
        assert_eq!(scripted.calls(), 1);
        assert!(dir.path().join("primary_one").is_dir());
    }

    #[test]
    fn failures_are_not_cached() {
        let dir = tempfile::tempdir().unwrap();
        let scripted = Arc::new(ScriptedBackend::new("s"));
        let cached = CachedBackend::new(scripted.clone(), Arc::new(ResponseCache::new(dir.path())));
        let request = GenerationRequest {
            prompt: "nothing registered".into(),
            params: DecodeParams::default(),
            model: "m".into(),
            backend: "s".into(),
        };
        assert!(cached.complete(&request).is_err());
        assert!(cached.complete(&request).is_err());
        assert_eq!(scripted.calls(), 2);
    }
}
