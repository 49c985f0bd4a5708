use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{AnalyticEvaluation, DatasetError, DatasetSplit, Essay, Source, SplitName};
use crate::rubric::{BandError, BandScore, Criterion, CriterionSet};

/// A single failed check on a raw record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum Violation {
    MissingField(String),
    EmptyText(String),
    NotHalfStep(String),
    OutOfRange(String),
    IncompleteAnalytic(String),
    InvalidEvaluation(String),
    Malformed(String),
    DuplicateId(String),
}

/// A record that did not make it into the corpus, for the audit log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropRecord {
    /// 1-based record number in the source file.
    pub record: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub essays: Vec<Essay>,
    /// Records read from the file, retained or not.
    pub raw_count: usize,
    pub dropped: Vec<DropRecord>,
}

impl IngestReport {
    pub fn write_drop_log(&self, path: &Path) -> Result<(), DatasetError> {
        let io = |source| DatasetError::Io { path: path.display().to_string(), source };
        let mut file = std::io::BufWriter::new(File::create(path).map_err(io)?);
        for drop in &self.dropped {
            let line = serde_json::to_string(drop).expect("drop records serialize");
            writeln!(file, "{line}").map_err(io)?;
        }
        file.flush().map_err(io)
    }
}

fn text_field(map: &Map<String, Value>, key: &str) -> Option<String> {
    match map.get(key)? {
        Value::String(s) => Some(s.replace("\r\n", "\n").trim().to_owned()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn band_violation(raw: &str, err: BandError) -> Violation {
    match err {
        BandError::OutOfRange(_) => Violation::OutOfRange(raw.to_owned()),
        BandError::NotHalfStep(_) => Violation::NotHalfStep(raw.to_owned()),
    }
}

fn read_band(value: &Value) -> Result<BandScore, Violation> {
    let raw = match value {
        Value::String(s) => s.trim().to_owned(),
        other => other.to_string(),
    };
    let x = match value {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    }
    .ok_or_else(|| Violation::NotHalfStep(raw.clone()))?;
    BandScore::validate(x).map_err(|e| band_violation(&raw, e))
}

fn read_analytic(map: &Map<String, Value>, violations: &mut Vec<Violation>) -> Option<CriterionSet> {
    let present: Vec<_> = Criterion::ALL.iter().filter(|c| map.contains_key(c.tag())).collect();
    if present.is_empty() {
        return None;
    }
    let mut bands = Vec::with_capacity(4);
    for criterion in Criterion::ALL {
        match map.get(criterion.tag()) {
            None | Some(Value::Null) => violations.push(Violation::IncompleteAnalytic(criterion.tag().into())),
            Some(value) => match read_band(value) {
                Ok(band) => bands.push(band),
                Err(v) => violations.push(v),
            },
        }
    }
    match bands[..] {
        [tr, cc, lr, gra] => Some(CriterionSet::new(tr, cc, lr, gra)),
        _ => None,
    }
}

/// Checks one raw record and builds an [`Essay`], or lists every failed
/// check.
///
/// Accepted keys: `id`, `prompt`, `essay`, `band`, optional `evaluation`
/// (free-text feedback or an analytic-evaluation object), optional top-level
/// `TR`/`CC`/`LR`/`GRA` bands, optional `feedback` and `cefr`. The prompt is
/// required for the primary corpus only.
pub fn validate_record(raw: &Value, source: Source) -> Result<Essay, Vec<Violation>> {
    let Some(map) = raw.as_object() else {
        return Err(vec![Violation::Malformed("record is not an object".into())]);
    };
    let mut violations = Vec::new();

    let id = match text_field(map, "id") {
        Some(id) if !id.is_empty() => Some(id),
        Some(_) => {
            violations.push(Violation::EmptyText("id".into()));
            None
        }
        None => {
            violations.push(Violation::MissingField("id".into()));
            None
        }
    };

    let mut required_text = |key: &str, required: bool| match text_field(map, key) {
        Some(text) if !text.is_empty() => Some(text),
        Some(_) if required => {
            violations.push(Violation::EmptyText(key.into()));
            None
        }
        None if required => {
            violations.push(Violation::MissingField(key.into()));
            None
        }
        _ => None,
    };
    let prompt = required_text("prompt", source == Source::PrimaryCorpus);
    let essay_text = required_text("essay", true);

    let overall = match map.get("band") {
        None | Some(Value::Null) => {
            violations.push(Violation::MissingField("band".into()));
            None
        }
        Some(value) => read_band(value).map_err(|v| violations.push(v)).ok(),
    };

    let mut analytic = read_analytic(map, &mut violations);
    let mut feedback = text_field(map, "feedback").filter(|f| !f.is_empty());
    match map.get("evaluation") {
        Some(Value::String(text)) if feedback.is_none() && !text.trim().is_empty() => {
            feedback = Some(text.trim().to_owned());
        }
        Some(obj @ Value::Object(_)) => match serde_json::from_value::<AnalyticEvaluation>(obj.clone()) {
            Ok(eval) => {
                if analytic.is_none() {
                    analytic = Some(eval.criteria());
                }
                if feedback.is_none() && !eval.general_feedback.is_empty() {
                    feedback = Some(eval.general_feedback);
                }
            }
            Err(e) => violations.push(Violation::InvalidEvaluation(e.to_string())),
        },
        _ => {}
    }

    if !violations.is_empty() {
        return Err(violations);
    }
    Ok(Essay {
        id: id.expect("checked"),
        prompt_text: prompt.unwrap_or_default(),
        essay_text: essay_text.expect("checked"),
        overall,
        analytic,
        feedback,
        source,
    })
}

fn is_delimited(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("csv") | Some("tsv")
    )
}

/// Raw records in file order. Unreadable JSONL lines come back as `Err`.
fn read_records(path: &Path, required: &[&str]) -> Result<Vec<Result<Value, String>>, DatasetError> {
    let path_str = path.display().to_string();
    let file = File::open(path).map_err(|source| DatasetError::Io { path: path_str.clone(), source })?;
    if is_delimited(path) {
        let delimiter = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("tsv")) { b'\t' } else { b',' };
        let mut reader = csv::ReaderBuilder::new().delimiter(delimiter).from_reader(file);
        let headers = reader
            .headers()
            .map_err(|e| DatasetError::Malformed { path: path_str.clone(), message: e.to_string() })?
            .clone();
        for column in required {
            if !headers.iter().any(|h| h.trim() == *column) {
                return Err(DatasetError::Schema { path: path_str, column: (*column).into() });
            }
        }
        let has_id = headers.iter().any(|h| h.trim() == "id");
        return Ok(reader
            .records()
            .enumerate()
            .map(|(row, record)| {
                let record = record.map_err(|e| e.to_string())?;
                let mut map = Map::new();
                for (header, field) in headers.iter().zip(record.iter()) {
                    map.insert(header.trim().to_owned(), Value::String(field.to_owned()));
                }
                if !has_id {
                    map.insert("id".into(), Value::String(format!("row-{}", row + 1)));
                }
                Ok(Value::Object(map))
            })
            .collect());
    }
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|source| DatasetError::Io { path: path_str.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str::<Value>(&line).map_err(|e| e.to_string()));
    }
    Ok(records)
}

fn ingest(path: &Path, source: Source, required: &[&str]) -> Result<IngestReport, DatasetError> {
    let records = read_records(path, required)?;
    let raw_count = records.len();
    let mut essays = Vec::with_capacity(raw_count);
    let mut dropped = Vec::new();
    let mut seen = HashSet::new();
    for (index, record) in records.into_iter().enumerate() {
        let record_no = index + 1;
        let raw = match record {
            Ok(raw) => raw,
            Err(message) => {
                dropped.push(DropRecord { record: record_no, id: None, violations: vec![Violation::Malformed(message)] });
                continue;
            }
        };
        match validate_record(&raw, source) {
            Ok(essay) if !seen.insert(essay.id.clone()) => {
                tracing::warn!(id = %essay.id, record = record_no, "duplicate essay id dropped");
                dropped.push(DropRecord {
                    record: record_no,
                    id: Some(essay.id.clone()),
                    violations: vec![Violation::DuplicateId(essay.id)],
                });
            }
            Ok(essay) => essays.push(essay),
            Err(violations) => dropped.push(DropRecord {
                record: record_no,
                id: raw.get("id").and_then(|v| v.as_str().map(str::to_owned).or_else(|| Some(v.to_string()))),
                violations,
            }),
        }
    }
    Ok(IngestReport { essays, raw_count, dropped })
}

/// Reads the primary corpus (JSONL, or CSV/TSV with a header row).
pub fn ingest_primary(path: &Path) -> Result<IngestReport, DatasetError> {
    ingest(path, Source::PrimaryCorpus, &["prompt", "essay", "band"])
}

/// Reads the auxiliary corpus. Its records are tagged as auxiliary and are
/// never assigned to the train or test split.
pub fn ingest_auxiliary(path: &Path) -> Result<IngestReport, DatasetError> {
    ingest(path, Source::AuxiliaryCorpus, &["essay", "band"])
}

/// Reads an `id → split` manifest: CSV with `id,split` columns, or JSONL
/// objects with the same keys.
pub fn load_split_manifest(path: &Path) -> Result<BTreeMap<String, SplitName>, DatasetError> {
    let path_str = path.display().to_string();
    let malformed = |message: String| DatasetError::Malformed { path: path_str.clone(), message };
    let records = read_records(path, &["id", "split"])?;
    let mut manifest = BTreeMap::new();
    for (i, record) in records.into_iter().enumerate() {
        let record = record.map_err(&malformed)?;
        let id = record.get("id").and_then(Value::as_str).ok_or_else(|| malformed(format!("entry {}: no id", i + 1)))?;
        let split = match record.get("split").and_then(Value::as_str).map(str::trim) {
            Some("train") => SplitName::Train,
            Some("test") => SplitName::Test,
            other => return Err(malformed(format!("entry {}: unknown split {other:?}", i + 1))),
        };
        if let Some(previous) = manifest.insert(id.trim().to_owned(), split) {
            if previous != split {
                return Err(malformed(format!("id {id} assigned to both splits")));
            }
        }
    }
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct SplitAssignment {
    pub train: DatasetSplit,
    pub test: DatasetSplit,
    /// Ingested essays the manifest does not mention.
    pub unassigned: Vec<String>,
}

/// Partitions essays by the manifest, preserving source order. Auxiliary
/// essays are never assigned.
pub fn assign_splits(essays: Vec<Essay>, manifest: &BTreeMap<String, SplitName>) -> Result<SplitAssignment, DatasetError> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut unassigned = Vec::new();
    for essay in essays {
        match (essay.source, manifest.get(&essay.id)) {
            (Source::PrimaryCorpus, Some(SplitName::Train)) => train.push(essay),
            (Source::PrimaryCorpus, Some(SplitName::Test)) => test.push(essay),
            _ => unassigned.push(essay.id),
        }
    }
    Ok(SplitAssignment {
        train: DatasetSplit::new(SplitName::Train, train)?,
        test: DatasetSplit::new(SplitName::Test, test)?,
        unassigned,
    })
}
