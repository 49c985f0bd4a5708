use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunError;
use crate::strategies::{FailureKind, ScoredResult};

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.display().to_string(), source }
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_error(parent))?;
    }
    let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io_error(path))?;
    let line = serde_json::to_string(value).expect("trace records serialize");
    writeln!(file, "{line}").map_err(io_error(path))
}

/// Per-strategy JSONL of [`ScoredResult`]s under `<out>/traces/`.
#[derive(Debug, Clone)]
pub struct TraceStore {
    dir: PathBuf,
}

impl TraceStore {
    pub fn new(out_dir: &Path) -> Self {
        TraceStore { dir: out_dir.join("traces") }
    }

    pub fn path(&self, strategy: &str) -> PathBuf {
        self.dir.join(format!("{strategy}.jsonl"))
    }

    pub fn append(&self, result: &ScoredResult) -> Result<(), RunError> {
        append_line(&self.path(&result.strategy), result)
    }

    /// Results already on disk, last record per essay winning. Lines that
    /// do not parse, such as one cut short by a killed run, are skipped.
    pub fn load(&self, strategy: &str) -> Result<BTreeMap<String, ScoredResult>, RunError> {
        let path = self.path(strategy);
        let file = match File::open(&path) {
            Ok(file) => file,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(BTreeMap::new()),
            Err(e) => return Err(io_error(&path)(e)),
        };
        let mut results = BTreeMap::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(io_error(&path))?;
            if let Ok(result) = serde_json::from_str::<ScoredResult>(&line) {
                if result.strategy == strategy {
                    results.insert(result.essay_id.clone(), result);
                }
            }
        }
        Ok(results)
    }

    /// Replaces the file with `results` in the given order.
    pub fn rewrite(&self, strategy: &str, results: &[ScoredResult]) -> Result<(), RunError> {
        let path = self.path(strategy);
        std::fs::create_dir_all(&self.dir).map_err(io_error(&self.dir))?;
        let tmp = path.with_extension("jsonl.tmp");
        let mut file = BufWriter::new(File::create(&tmp).map_err(io_error(&tmp))?);
        for result in results {
            let line = serde_json::to_string(result).expect("trace records serialize");
            writeln!(file, "{line}").map_err(io_error(&tmp))?;
        }
        file.flush().map_err(io_error(&tmp))?;
        drop(file);
        std::fs::rename(&tmp, &path).map_err(io_error(&path))
    }
}

/// Whether a stored result counts as done on resume. Backend failures are
/// retried; parse failures are a verdict on the model's answer and stay.
pub fn is_complete(result: &ScoredResult) -> bool {
    !result.failure.as_ref().is_some_and(|f| f.kind == FailureKind::Backend)
}

/// One line of the append-only per-essay failure log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub strategy: String,
    pub essay_id: String,
    pub kind: FailureKind,
    pub detail: String,
}

impl FailureRecord {
    pub fn from_result(result: &ScoredResult) -> Option<Self> {
        result.failure.as_ref().map(|f| FailureRecord {
            strategy: result.strategy.clone(),
            essay_id: result.essay_id.clone(),
            kind: f.kind,
            detail: f.detail.clone(),
        })
    }
}

pub fn append_failure(out_dir: &Path, record: &FailureRecord) -> Result<(), RunError> {
    append_line(&out_dir.join("failures.jsonl"), record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strategies::StrategyKind;

    fn result(id: &str, failure: Option<FailureKind>) -> ScoredResult {
        let mut value = serde_json::json!({
            "essay_id": id, "strategy": "s", "kind": "criterion-joint",
            "feedback": "", "exemplar_ids": [], "calls": []
        });
        if let Some(kind) = failure {
            value["failure"] = serde_json::json!({"kind": kind, "detail": "x"});
        }
        serde_json::from_value(value).unwrap()
    }

    #[test]
    fn append_load_rewrite() {
        let dir = tempfile::tempdir().unwrap();
        let store = TraceStore::new(dir.path());
        assert!(store.load("s").unwrap().is_empty());
        store.append(&result("b", Some(FailureKind::Backend))).unwrap();
        store.append(&result("a", None)).unwrap();
        store.append(&result("b", None)).unwrap();
        let mut f = OpenOptions::new().append(true).open(store.path("s")).unwrap();
        write!(f, "{{\"essay_id\": \"c\", \"stra").unwrap();
        let loaded = store.load("s").unwrap();
        assert_eq!(loaded.len(), 2);
        assert!(loaded["b"].failure.is_none());
        assert_eq!(loaded["a"].kind, StrategyKind::CriterionJoint);

        store.rewrite("s", &[result("a", None)]).unwrap();
        let text = std::fs::read_to_string(store.path("s")).unwrap();
        assert_eq!(text.lines().count(), 1);
    }

    #[test]
    fn resume_policy() {
        assert!(is_complete(&result("a", None)));
        assert!(is_complete(&result("a", Some(FailureKind::Parse))));
        assert!(!is_complete(&result("a", Some(FailureKind::Backend))));
    }
}
