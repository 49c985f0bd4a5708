use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::{Backends, ConfigError, ExperimentConfig, StrategyEntry};
use super::report::{build_report, emit_report, EvaluationReport};
use super::traces::{append_failure, is_complete, FailureRecord, TraceStore};
use super::RunError;
use crate::dataset::{
    assign_splits, ingest_auxiliary, ingest_primary, load_split_manifest, regenerate_analytic, split_stats,
    DatasetSplit, DatasetStats, Essay, RegenError, RegeneratedRecord, Rejection, SplitName,
};
use crate::prompting::{render_single_criterion, template_versions};
use crate::retrieval::{Embedder, RetrievalIndex};
use crate::rubric::Criterion;
use crate::strategies::{ExemplarPool, ExemplarSource, ScoredResult, Strategy};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Cache-only replay for remote backends.
    pub offline: bool,
    /// Keep only the first `n` essays of the split being processed.
    pub limit: Option<usize>,
    /// Restrict to these strategies; empty means all configured.
    pub strategies: Vec<String>,
}

/// What ingestion kept and dropped.
#[derive(Debug, Clone, Serialize)]
pub struct IngestSummary {
    pub primary_raw: usize,
    pub primary_retained: usize,
    pub primary_dropped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auxiliary_raw: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auxiliary_retained: Option<usize>,
    pub train: usize,
    pub test: usize,
    pub unassigned: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_stats: Option<DatasetStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_stats: Option<DatasetStats>,
}

pub struct LoadedDataset {
    pub train: DatasetSplit,
    pub test: DatasetSplit,
    pub summary: IngestSummary,
}

impl LoadedDataset {
    pub fn essays_by_id(&self) -> BTreeMap<String, Essay> {
        self.train.essays().iter().chain(self.test.essays()).map(|e| (e.id.clone(), e.clone())).collect()
    }

    pub fn find(&self, id: &str) -> Option<&Essay> {
        self.test.get(id).or_else(|| self.train.get(id))
    }
}

/// Ingests the primary corpus, and the auxiliary corpus when configured,
/// assigns splits from the manifest and writes drop logs under
/// `<out>/ingest/`. Statistics are computed before any limit.
pub fn load_dataset(config: &ExperimentConfig) -> Result<LoadedDataset, RunError> {
    let primary = ingest_primary(&config.dataset.primary)?;
    let log_dir = config.output_dir.join("ingest");
    std::fs::create_dir_all(&log_dir).map_err(|source| RunError::io(&log_dir, source))?;
    primary.write_drop_log(&log_dir.join("primary_dropped.jsonl"))?;
    let auxiliary = match &config.dataset.auxiliary {
        Some(path) => {
            let report = ingest_auxiliary(path)?;
            report.write_drop_log(&log_dir.join("auxiliary_dropped.jsonl"))?;
            Some(report)
        }
        None => None,
    };
    let manifest = load_split_manifest(&config.dataset.manifest)?;
    let (raw, retained, dropped) = (primary.raw_count, primary.essays.len(), primary.dropped.len());
    let splits = assign_splits(primary.essays, &manifest)?;
    let summary = IngestSummary {
        primary_raw: raw,
        primary_retained: retained,
        primary_dropped: dropped,
        auxiliary_raw: auxiliary.as_ref().map(|a| a.raw_count),
        auxiliary_retained: auxiliary.as_ref().map(|a| a.essays.len()),
        train: splits.train.len(),
        test: splits.test.len(),
        unassigned: splits.unassigned.len(),
        train_stats: split_stats(&splits.train).ok(),
        test_stats: split_stats(&splits.test).ok(),
    };
    Ok(LoadedDataset { train: splits.train, test: splits.test, summary })
}

fn scored_only(split: &DatasetSplit) -> Result<DatasetSplit, RunError> {
    let essays = split.essays().iter().filter(|e| e.overall.is_some()).cloned().collect();
    Ok(DatasetSplit::new(SplitName::Train, essays)?)
}

/// Embeds the scored training essays and saves the index.
pub fn build_index_file(config: &ExperimentConfig, train: &DatasetSplit) -> Result<(PathBuf, RetrievalIndex), RunError> {
    let embedder = config.embedder.build();
    let index = RetrievalIndex::build(&scored_only(train)?, embedder.as_ref())?;
    let path = config.index_path();
    index.save(&path)?;
    Ok((path, index))
}

/// The configured index when it exists on disk, else one built in memory.
fn retrieval_index(config: &ExperimentConfig, train: &DatasetSplit, embedder: &dyn Embedder) -> Result<RetrievalIndex, RunError> {
    let path = config.index_path();
    if path.exists() {
        return Ok(RetrievalIndex::load(&path, &embedder.id())?);
    }
    tracing::info!(path = %path.display(), "no index on disk, building from the training split");
    Ok(RetrievalIndex::build(&scored_only(train)?, embedder)?)
}

struct Pools {
    retrieval: Option<ExemplarPool>,
    fixed: Option<ExemplarPool>,
}

impl Pools {
    fn build(config: &ExperimentConfig, entries: &[&StrategyEntry], train: &DatasetSplit) -> Result<Self, RunError> {
        let needs = |source| entries.iter().any(|e| e.config.k_shots() > 0 && e.config.exemplar_source() == source);
        let retrieval = if needs(ExemplarSource::Retrieval) {
            let embedder: Arc<dyn Embedder> = Arc::from(config.embedder.build());
            let index = retrieval_index(config, train, embedder.as_ref())?;
            Some(ExemplarPool::retrieval(Arc::new(index), embedder))
        } else {
            None
        };
        let fixed = needs(ExemplarSource::FixedList).then(|| ExemplarPool::fixed_list(train, config.seed));
        Ok(Pools { retrieval, fixed })
    }

    fn for_source(&self, source: ExemplarSource) -> &ExemplarPool {
        const NONE: &ExemplarPool = &ExemplarPool::None;
        match source {
            ExemplarSource::Retrieval => self.retrieval.as_ref().unwrap_or(NONE),
            ExemplarSource::FixedList => self.fixed.as_ref().unwrap_or(NONE),
            ExemplarSource::None => NONE,
        }
    }
}

/// Runs `work` over `items` on at most `bound` threads. Results reach
/// `on_result` on the calling thread, in completion order.
pub fn run_bounded<T, R, W, C>(items: &[T], bound: usize, work: W, mut on_result: C)
where
    T: Sync,
    R: Send,
    W: Fn(&T) -> R + Sync,
    C: FnMut(usize, R),
{
    let cursor = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..bound.max(1).min(items.len()) {
            let tx = tx.clone();
            let (cursor, work) = (&cursor, &work);
            scope.spawn(move || loop {
                let i = cursor.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                if tx.send((i, work(item))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, result) in rx {
            on_result(i, result);
        }
    });
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Volatile facts about one run, kept apart from the report so report files
/// stay byte-identical across reruns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub template_versions: BTreeMap<String, String>,
    pub started_at: u64,
    pub finished_at: u64,
    pub offline: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    /// Essays scored in this run, per strategy.
    pub scored_now: BTreeMap<String, usize>,
    /// Essays taken from earlier traces, per strategy.
    pub resumed: BTreeMap<String, usize>,
    pub cache_hits: usize,
    pub cache_misses: usize,
    /// Calls that reached a backend, per backend name.
    pub backend_calls: BTreeMap<String, usize>,
    /// Peak concurrent calls on scripted backends; 0 when there are none.
    pub peak_in_flight: usize,
    pub failures: usize,
}

pub struct RunOutcome {
    pub report: EvaluationReport,
    pub results: Vec<Vec<ScoredResult>>,
    pub meta: RunMeta,
}

fn select_entries<'a>(config: &'a ExperimentConfig, names: &[String]) -> Result<Vec<&'a StrategyEntry>, RunError> {
    if names.is_empty() {
        return Ok(config.strategies.iter().collect());
    }
    let wanted: BTreeSet<&str> = names.iter().map(String::as_str).collect();
    for name in &wanted {
        config.strategy(name)?;
    }
    Ok(config.strategies.iter().filter(|s| wanted.contains(s.name.as_str())).collect())
}

fn limited(mut split: DatasetSplit, limit: Option<usize>) -> DatasetSplit {
    if let Some(n) = limit {
        split.truncate(n);
    }
    split
}

/// Scores every (strategy, test essay) pair not already completed in the
/// traces, then writes traces, report files and `run_meta.json`.
pub fn run_experiment(config: &ExperimentConfig, options: &RunOptions) -> Result<RunOutcome, RunError> {
    let started_at = unix_now();
    let entries = select_entries(config, &options.strategies)?;
    let backends = Backends::build(config, options.offline)?;
    let strategies = entries
        .iter()
        .map(|e| {
            Strategy::new(&e.name, e.config.clone(), &backends.handles)
                .map_err(|source| ConfigError::Strategy { name: e.name.clone(), source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let data = load_dataset(config)?;
    let test = limited(data.test.clone(), options.limit);
    let pools = Pools::build(config, &entries, &data.train)?;
    let store = TraceStore::new(&config.output_dir);

    let mut done: Vec<BTreeMap<String, ScoredResult>> = Vec::new();
    let mut tasks = Vec::new();
    let mut meta_resumed = BTreeMap::new();
    for (si, strategy) in strategies.iter().enumerate() {
        let mut previous = store.load(&strategy.name)?;
        previous.retain(|id, r| test.get(id).is_some() && is_complete(r));
        meta_resumed.insert(strategy.name.clone(), previous.len());
        for (ei, essay) in test.essays().iter().enumerate() {
            if !previous.contains_key(&essay.id) {
                tasks.push((si, ei));
            }
        }
        done.push(previous);
    }
    tracing::info!(tasks = tasks.len(), strategies = strategies.len(), essays = test.len(), "scoring");

    let mut scored_now: BTreeMap<String, usize> = strategies.iter().map(|s| (s.name.clone(), 0)).collect();
    let mut failures = 0;
    let mut write_error = None;
    let total = tasks.len();
    let mut finished = 0;
    run_bounded(
        &tasks,
        config.concurrency,
        |&(si, ei)| {
            let strategy = &strategies[si];
            strategy.score(&test.essays()[ei], pools.for_source(strategy.config.exemplar_source()))
        },
        |i, result| {
            let si = tasks[i].0;
            finished += 1;
            if let Some(record) = FailureRecord::from_result(&result) {
                failures += 1;
                tracing::warn!(strategy = %record.strategy, essay = %record.essay_id, detail = %record.detail, "scoring failed");
                if let Err(e) = append_failure(&config.output_dir, &record) {
                    write_error.get_or_insert(e);
                }
            }
            if let Err(e) = store.append(&result) {
                write_error.get_or_insert(e);
            }
            if finished % 50 == 0 || finished == total {
                tracing::info!(finished, total, "progress");
            }
            *scored_now.get_mut(&strategies[si].name).expect("known strategy") += 1;
            done[si].insert(result.essay_id.clone(), result);
        },
    );
    if let Some(e) = write_error {
        return Err(e);
    }

    let results: Vec<Vec<ScoredResult>> = done
        .into_iter()
        .map(|mut by_id| test.essays().iter().filter_map(|e| by_id.remove(&e.id)).collect())
        .collect();
    for (strategy, results) in strategies.iter().zip(&results) {
        store.rewrite(&strategy.name, results)?;
    }
    let report = build_report(config, &entries, &test, &results, options.limit);
    emit_report(&report, &results, &config.case_study, &data.essays_by_id(), &config.output_dir)?;
    let meta = RunMeta {
        config_hash: config.hash.clone(),
        template_versions: template_versions(),
        started_at,
        finished_at: unix_now(),
        offline: options.offline,
        limit: options.limit,
        scored_now,
        resumed: meta_resumed,
        cache_hits: backends.cache_hits(),
        cache_misses: backends.cache_misses(),
        backend_calls: backends.calls_by_backend(),
        peak_in_flight: backends.scripted_peak_in_flight(),
        failures,
    };
    let meta_path = config.output_dir.join("run_meta.json");
    let json = serde_json::to_string_pretty(&meta).expect("run metadata serializes") + "\n";
    std::fs::write(&meta_path, json).map_err(|source| RunError::io(&meta_path, source))?;
    Ok(RunOutcome { report, results, meta })
}

/// Rebuilds and re-emits the report from the traces on disk, without any
/// model calls. Essays missing from the traces count as not scored.
pub fn rebuild_report(config: &ExperimentConfig, options: &RunOptions) -> Result<EvaluationReport, RunError> {
    let entries = select_entries(config, &options.strategies)?;
    let data = load_dataset(config)?;
    let test = limited(data.test.clone(), options.limit);
    let store = TraceStore::new(&config.output_dir);
    let results = entries
        .iter()
        .map(|entry| {
            let mut by_id = store.load(&entry.name)?;
            Ok(test.essays().iter().filter_map(|e| by_id.remove(&e.id)).collect())
        })
        .collect::<Result<Vec<Vec<ScoredResult>>, RunError>>()?;
    let report = build_report(config, &entries, &test, &results, options.limit);
    emit_report(&report, &results, &config.case_study, &data.essays_by_id(), &config.output_dir)?;
    Ok(report)
}

/// Scores a single essay, from either split, with one strategy.
pub fn score_one(config: &ExperimentConfig, strategy: &str, essay_id: &str, offline: bool) -> Result<ScoredResult, RunError> {
    let entry = config.strategy(strategy)?;
    let backends = Backends::build(config, offline)?;
    let bound = Strategy::new(&entry.name, entry.config.clone(), &backends.handles)
        .map_err(|source| ConfigError::Strategy { name: entry.name.clone(), source })?;
    let data = load_dataset(config)?;
    let essay = data.find(essay_id).ok_or_else(|| RunError::UnknownEssay(essay_id.to_owned()))?;
    let pools = Pools::build(config, &[entry], &data.train)?;
    Ok(bound.score(essay, pools.for_source(entry.config.exemplar_source())))
}

/// One supervised row for a criterion adapter: the single-criterion prompt
/// and the JSON answer it should produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRow {
    pub id: String,
    pub criterion: Criterion,
    pub instruction: String,
    pub prompt: String,
    pub essay: String,
    pub target: String,
}

/// Four rows per accepted record, one per criterion. Task Response targets
/// carry only the score, as its output schema does.
pub fn instruction_rows(record: &RegeneratedRecord) -> Result<Vec<InstructionRow>, RunError> {
    let essay = Essay::new(&record.id, &record.prompt, &record.essay);
    let mut rows = Vec::with_capacity(4);
    for criterion in Criterion::ALL {
        let (band, comment) = match criterion {
            Criterion::TaskResponse => (record.tr, None),
            Criterion::CoherenceCohesion => (record.cc, Some(&record.cc_comment)),
            Criterion::LexicalResource => (record.lr, Some(&record.lr_comment)),
            Criterion::GrammaticalRangeAccuracy => (record.gra, Some(&record.gra_comment)),
        };
        let target = match comment {
            Some(comment) => serde_json::json!({"score": band.value(), "comment": comment}),
            None => serde_json::json!({"score": band.value()}),
        };
        rows.push(InstructionRow {
            id: record.id.clone(),
            criterion,
            instruction: render_single_criterion(criterion, &essay).map_err(RunError::Render)?,
            prompt: record.prompt.clone(),
            essay: record.essay.clone(),
            target: target.to_string(),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedRecord {
    pub id: String,
    #[serde(flatten)]
    pub rejection: Rejection,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RegenSummary {
    pub attempted: usize,
    pub accepted: usize,
    pub rejected: BTreeMap<String, usize>,
    pub errors: usize,
    pub out_dir: PathBuf,
}

fn rejection_cause(rejection: &Rejection) -> &'static str {
    match rejection {
        Rejection::InvalidJson { .. } => "invalid_json",
        Rejection::InadmissibleBand { .. } => "inadmissible_band",
        Rejection::MeanConstraint { .. } => "mean_constraint",
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), RunError> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).expect("rows serialize"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| RunError::io(path, source))
}

/// Re-generates analytic evaluations for the scored training essays and
/// writes `<out>/regen/accepted.jsonl`, `rejected.jsonl`, `errors.jsonl` and
/// per-criterion instruction sets under `instructions/`.
pub fn run_regeneration(config: &ExperimentConfig, options: &RunOptions) -> Result<RegenSummary, RunError> {
    let regen = config.regen.as_ref().ok_or(ConfigError::MissingRegen)?;
    let backends = Backends::build(config, options.offline)?;
    let handle = backends.handle(&regen.backend).expect("validated backend reference").clone();
    let data = load_dataset(config)?;
    let train = limited(scored_only(&data.train)?, options.limit);
    let essays = train.essays();

    let mut outcomes: Vec<Option<Result<_, RegenError>>> = (0..essays.len()).map(|_| None).collect();
    run_bounded(
        essays,
        config.concurrency,
        |essay| regenerate_analytic(essay, &handle, regen.tolerance),
        |i, outcome| outcomes[i] = Some(outcome),
    );

    let out_dir = config.output_dir.join("regen");
    let instructions_dir = out_dir.join("instructions");
    std::fs::create_dir_all(&instructions_dir).map_err(|source| RunError::io(&instructions_dir, source))?;
    let mut summary = RegenSummary { attempted: essays.len(), out_dir: out_dir.clone(), ..RegenSummary::default() };
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    let mut errors = Vec::new();
    for (essay, outcome) in essays.iter().zip(outcomes) {
        match outcome.expect("every essay processed") {
            Ok(evaluation) => {
                accepted.push(RegeneratedRecord::new(essay, evaluation).expect("scored essays only"));
            }
            Err(RegenError::Rejected(rejection)) => {
                *summary.rejected.entry(rejection_cause(&rejection).to_owned()).or_default() += 1;
                rejected.push(RejectedRecord { id: essay.id.clone(), rejection });
            }
            Err(other) => {
                errors.push(serde_json::json!({"id": essay.id, "error": other.to_string()}));
            }
        }
    }
    summary.accepted = accepted.len();
    summary.errors = errors.len();
    write_jsonl(&out_dir.join("accepted.jsonl"), &accepted)?;
    write_jsonl(&out_dir.join("rejected.jsonl"), &rejected)?;
    write_jsonl(&out_dir.join("errors.jsonl"), &errors)?;
    let mut by_criterion: BTreeMap<&str, Vec<InstructionRow>> = BTreeMap::new();
    for record in &accepted {
        for row in instruction_rows(record)? {
            by_criterion.entry(row.criterion.tag()).or_default().push(row);
        }
    }
    for criterion in Criterion::ALL {
        let rows = by_criterion.remove(criterion.tag()).unwrap_or_default();
        write_jsonl(&instructions_dir.join(format!("{}.jsonl", criterion.tag())), &rows)?;
    }
    Ok(summary)
}
