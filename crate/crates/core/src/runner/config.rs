use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::DEFAULT_MEAN_TOLERANCE;
use crate::llm::{
    Backend, BackendHandle, CacheOnlyBackend, CachedBackend, DecodeParams, OpenAiBackend, OpenAiConfig, Pricing,
    PricingTable, ResponseCache, ScriptedBackend,
};
use crate::retrieval::EmbedderConfig;
use crate::strategies::{StrategyConfig, StrategyError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("config lists no strategies")]
    NoStrategies,
    #[error("strategy name `{0}` is used twice")]
    DuplicateStrategy(String),
    #[error("backend name `{0}` is defined twice")]
    DuplicateBackend(String),
    #[error("`{user}` refers to undefined backend `{backend}`")]
    UnknownBackend { user: String, backend: String },
    #[error("concurrency must be at least 1")]
    ZeroConcurrency,
    #[error("strategy `{name}`: {source}")]
    Strategy { name: String, source: StrategyError },
    #[error("backend `{name}`: {message}")]
    Backend { name: String, message: String },
    #[error("no strategy named `{0}`")]
    UnknownStrategy(String),
    #[error("regeneration needs a `regen` section naming its backend")]
    MissingRegen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Primary corpus, JSONL or CSV/TSV.
    pub primary: PathBuf,
    /// Split manifest mapping essay id to `train` or `test`.
    pub manifest: PathBuf,
    /// Auxiliary corpus, ingested and validated only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auxiliary: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendKind {
    /// An OpenAI-compatible chat-completions endpoint.
    #[serde(rename = "openai")]
    OpenAi {
        base_url: String,
        /// Environment variable holding the API key.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        api_key_env: Option<String>,
        #[serde(default = "default_retries")]
        max_retries: u32,
        #[serde(default = "default_timeout")]
        timeout_s: u64,
    },
    /// Fixture replay from a JSONL file.
    Scripted { fixtures: PathBuf },
}

fn default_retries() -> u32 {
    4
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub name: String,
    pub model: String,
    #[serde(flatten)]
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pricing: Option<Pricing>,
}

/// Presentation labels for the results table and cost CSV. Training hours
/// and GPU count are declared, not measured: this crate does not train.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyLabels {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approach: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_hours: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_count: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyEntry {
    pub name: String,
    #[serde(flatten)]
    pub config: StrategyConfig,
    #[serde(default)]
    pub labels: StrategyLabels,
}

/// A results row produced outside this harness, such as a fine-tuned
/// classifier evaluated by the training tooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalRow {
    pub approach: String,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub scheme: String,
    #[serde(default)]
    pub k_shot: String,
    pub accuracy: f64,
    pub f1: f64,
    pub rmse: f64,
    pub mae: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_hours: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_count: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseStudyEntry {
    pub id: String,
    pub topic: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegenConfig {
    pub backend: String,
    #[serde(default = "default_mean_tolerance")]
    pub tolerance: f64,
}

fn default_mean_tolerance() -> f64 {
    DEFAULT_MEAN_TOLERANCE
}

fn default_concurrency() -> usize {
    4
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// One experiment, fully described by a JSON file. Relative paths resolve
/// against the file's directory; secrets come only from the environment
/// variables the backends name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub backends: Vec<BackendConfig>,
    pub strategies: Vec<StrategyEntry>,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    /// Prebuilt retrieval index; built in memory from the training split
    /// when absent or missing on disk.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<PathBuf>,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Seeds the fixed-list exemplar shuffle.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub decode: DecodeParams,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub case_study: Vec<CaseStudyEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub external_rows: Vec<ExternalRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regen: Option<RegenConfig>,
    /// Short hash of the config file bytes.
    #[serde(skip)]
    pub hash: String,
}

fn resolve(base: &Path, path: &mut PathBuf) {
    if path.is_relative() {
        *path = base.join(&*path);
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let name = path.display().to_string();
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Io { path: name.clone(), source })?;
        let mut config: ExperimentConfig = serde_json::from_slice(&bytes)
            .map_err(|e| ConfigError::Parse { path: name, message: e.to_string() })?;
        config.hash = hex::encode(&Sha256::digest(&bytes)[..8]);
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.dataset.primary);
        resolve(base, &mut self.dataset.manifest);
        if let Some(aux) = &mut self.dataset.auxiliary {
            resolve(base, aux);
        }
        if let Some(index) = &mut self.index {
            resolve(base, index);
        }
        resolve(base, &mut self.cache_dir);
        resolve(base, &mut self.output_dir);
        for backend in &mut self.backends {
            if let BackendKind::Scripted { fixtures } = &mut backend.kind {
                resolve(base, fixtures);
            }
        }
    }

    /// Checks names and references; returns warnings for unusual but
    /// allowed settings.
    pub fn validate(&self) -> Result<Vec<String>, ConfigError> {
        if self.strategies.is_empty() {
            return Err(ConfigError::NoStrategies);
        }
        if self.concurrency == 0 {
            return Err(ConfigError::ZeroConcurrency);
        }
        let mut backends = HashSet::new();
        for backend in &self.backends {
            if !backends.insert(backend.name.as_str()) {
                return Err(ConfigError::DuplicateBackend(backend.name.clone()));
            }
        }
        let mut names = HashSet::new();
        let mut warnings = Vec::new();
        for entry in &self.strategies {
            if !names.insert(entry.name.as_str()) {
                return Err(ConfigError::DuplicateStrategy(entry.name.clone()));
            }
            for backend in entry.config.backend_names() {
                if !backends.contains(backend) {
                    return Err(ConfigError::UnknownBackend { user: entry.name.clone(), backend: backend.into() });
                }
            }
            let strategy_warnings = entry
                .config
                .validate()
                .map_err(|source| ConfigError::Strategy { name: entry.name.clone(), source })?;
            warnings.extend(strategy_warnings.into_iter().map(|w| format!("strategy `{}`: {w}", entry.name)));
        }
        if let Some(regen) = &self.regen {
            if !backends.contains(regen.backend.as_str()) {
                return Err(ConfigError::UnknownBackend { user: "regen".into(), backend: regen.backend.clone() });
            }
        }
        Ok(warnings)
    }

    pub fn strategy(&self, name: &str) -> Result<&StrategyEntry, ConfigError> {
        self.strategies
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| ConfigError::UnknownStrategy(name.to_owned()))
    }

    /// Model id → pricing for every backend that declares prices.
    pub fn pricing(&self) -> PricingTable {
        self.backends.iter().filter_map(|b| b.pricing.map(|p| (b.model.clone(), p))).collect()
    }

    pub fn backend_model(&self, name: &str) -> Option<&str> {
        self.backends.iter().find(|b| b.name == name).map(|b| b.model.as_str())
    }

    pub fn index_path(&self) -> PathBuf {
        self.index.clone().unwrap_or_else(|| self.output_dir.join("index.jsonl"))
    }
}

/// Instantiated backends, each wrapped in the shared response cache.
pub struct Backends {
    pub handles: BTreeMap<String, BackendHandle>,
    cached: BTreeMap<String, Arc<CachedBackend>>,
    scripted: BTreeMap<String, Arc<ScriptedBackend>>,
}

impl Backends {
    /// In offline mode remote backends answer from the cache only.
    pub fn build(config: &ExperimentConfig, offline: bool) -> Result<Self, ConfigError> {
        let cache = Arc::new(ResponseCache::new(&config.cache_dir));
        let mut backends = Backends { handles: BTreeMap::new(), cached: BTreeMap::new(), scripted: BTreeMap::new() };
        for def in &config.backends {
            let inner: Arc<dyn Backend> = match &def.kind {
                BackendKind::Scripted { fixtures } => {
                    let scripted = Arc::new(ScriptedBackend::from_jsonl(&def.name, fixtures).map_err(|e| {
                        ConfigError::Backend { name: def.name.clone(), message: e.to_string() }
                    })?);
                    backends.scripted.insert(def.name.clone(), scripted.clone());
                    scripted
                }
                BackendKind::OpenAi { .. } if offline => Arc::new(CacheOnlyBackend::new(&def.name)),
                BackendKind::OpenAi { base_url, api_key_env, max_retries, timeout_s } => {
                    let key = match api_key_env {
                        Some(var) => Some(std::env::var(var).map_err(|_| ConfigError::Backend {
                            name: def.name.clone(),
                            message: format!("environment variable {var} is not set"),
                        })?),
                        None => None,
                    };
                    let openai = OpenAiConfig {
                        base_url: base_url.clone(),
                        max_retries: *max_retries,
                        initial_backoff_ms: 500,
                        timeout_s: *timeout_s,
                    };
                    Arc::new(OpenAiBackend::new(&def.name, openai, key))
                }
            };
            let cached = Arc::new(CachedBackend::new(inner, cache.clone()));
            backends.cached.insert(def.name.clone(), cached.clone());
            let handle = BackendHandle::new(&def.name, &def.model, cached).with_params(config.decode.clone());
            backends.handles.insert(def.name.clone(), handle);
        }
        Ok(backends)
    }

    pub fn handle(&self, name: &str) -> Option<&BackendHandle> {
        self.handles.get(name)
    }

    pub fn scripted(&self, name: &str) -> Option<&Arc<ScriptedBackend>> {
        self.scripted.get(name)
    }

    pub fn cache_hits(&self) -> usize {
        self.cached.values().map(|c| c.hits()).sum()
    }

    pub fn cache_misses(&self) -> usize {
        self.cached.values().map(|c| c.misses()).sum()
    }

    /// Calls forwarded past the cache, per backend name.
    pub fn calls_by_backend(&self) -> BTreeMap<String, usize> {
        self.cached.iter().map(|(name, c)| (name.clone(), c.misses())).collect()
    }

    /// Highest number of simultaneous calls seen by any scripted backend.
    pub fn scripted_peak_in_flight(&self) -> usize {
        self.scripted.values().map(|s| s.peak_in_flight()).max().unwrap_or(0)
    }
}
