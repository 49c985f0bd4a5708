use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{CaseStudyEntry, ExperimentConfig, ExternalRow, StrategyEntry, StrategyLabels};
use super::RunError;
use crate::dataset::{DatasetSplit, Essay};
use crate::eval::{Exclusion, MetricsReport, PairedScores};
use crate::llm::{estimate_cost, PricingTable};
use crate::prompting::template_versions;
use crate::strategies::{ExemplarSource, FailureKind, ScoredResult, StrategyKind};

/// Token, money and time accounting for one strategy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub prompt_tokens: u64,
    pub output_tokens: u64,
    /// `None` when a model used by the strategy has no declared pricing.
    pub amount: Option<f64>,
    /// Summed model-call latency.
    pub api_latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_hours: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_count: Option<u32>,
}

impl CostSummary {
    /// Declared training hours, else measured API time in hours.
    pub fn cost_hours(&self) -> f64 {
        self.training_hours.unwrap_or(self.api_latency_ms as f64 / 3_600_000.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub name: String,
    pub kind: StrategyKind,
    pub approach: String,
    pub model: String,
    pub scheme: String,
    pub k_shots: usize,
    pub exemplar_source: ExemplarSource,
    pub n_total: usize,
    pub n_scored: usize,
    pub n_excluded: usize,
    pub n_backend_failures: usize,
    /// Absent when nothing could be scored.
    pub metrics: Option<MetricsReport>,
    pub excluded: Vec<Exclusion>,
    pub cost: CostSummary,
}

impl StrategyReport {
    pub fn k_shot_label(&self) -> String {
        match self.k_shots {
            0 => "zero-shot".into(),
            k => format!("{k}-shot"),
        }
    }
}

/// Everything the report files are rendered from. Contains no timestamps
/// or paths, so equal inputs give byte-equal files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config_hash: String,
    pub template_versions: BTreeMap<String, String>,
    pub embedder: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    pub n_test: usize,
    pub strategies: Vec<StrategyReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub external_rows: Vec<ExternalRow>,
}

fn labels_or<'a>(value: &'a Option<String>, fallback: &'a str) -> String {
    value.clone().unwrap_or_else(|| fallback.to_owned())
}

fn cost_of(results: &[ScoredResult], pricing: &PricingTable, labels: &StrategyLabels) -> CostSummary {
    let entries: Vec<_> = results.iter().flat_map(ScoredResult::usage_entries).collect();
    let mut summary = CostSummary {
        prompt_tokens: entries.iter().map(|e| e.usage.prompt_tokens).sum(),
        output_tokens: entries.iter().map(|e| e.usage.output_tokens).sum(),
        amount: None,
        api_latency_ms: entries.iter().map(|e| e.latency_ms).sum(),
        training_hours: labels.training_hours,
        gpu_count: labels.gpu_count,
    };
    if let Ok(record) = estimate_cost(&entries, pricing) {
        summary.amount = Some(record.amount);
    }
    summary
}

/// Pairs each test essay's prediction with its gold band. Essays without a
/// result, without a gold band, or whose scoring failed are excluded with a
/// reason.
pub fn paired_scores(test: &DatasetSplit, results: &[ScoredResult]) -> PairedScores {
    let by_id: BTreeMap<&str, &ScoredResult> = results.iter().map(|r| (r.essay_id.as_str(), r)).collect();
    let mut scores = PairedScores::new();
    for essay in test.essays() {
        let outcome = match (by_id.get(essay.id.as_str()), essay.overall) {
            (_, None) => Err("no gold band".to_owned()),
            (None, _) => Err("not scored".to_owned()),
            (Some(r), Some(gold)) => match (&r.failure, r.overall) {
                (Some(f), _) => Err(format!("{}: {}", failure_label(f.kind), f.detail)),
                (None, Some(pred)) => Ok((pred, gold)),
                (None, None) => Err("no overall band".to_owned()),
            },
        };
        let pushed = match outcome {
            Ok((pred, gold)) => scores.push(&essay.id, pred, gold),
            Err(reason) => scores.exclude(&essay.id, reason),
        };
        pushed.expect("test split ids are unique");
    }
    scores
}

fn failure_label(kind: FailureKind) -> &'static str {
    match kind {
        FailureKind::Parse => "parse failure",
        FailureKind::Backend => "backend failure",
        FailureKind::Render => "render failure",
        FailureKind::Retrieval => "retrieval failure",
    }
}

pub fn strategy_report(
    entry: &StrategyEntry,
    model: &str,
    test: &DatasetSplit,
    results: &[ScoredResult],
    pricing: &PricingTable,
) -> StrategyReport {
    let scores = paired_scores(test, results);
    let metrics = MetricsReport::compute(&scores).ok();
    StrategyReport {
        name: entry.name.clone(),
        kind: entry.config.kind,
        approach: labels_or(&entry.labels.approach, &entry.name),
        model: labels_or(&entry.labels.model, model),
        scheme: labels_or(&entry.labels.scheme, entry.config.kind.name()),
        k_shots: entry.config.k_shots(),
        exemplar_source: entry.config.exemplar_source(),
        n_total: scores.total(),
        n_scored: scores.pairs().len(),
        n_excluded: scores.excluded().len(),
        n_backend_failures: results
            .iter()
            .filter(|r| r.failure.as_ref().is_some_and(|f| f.kind == FailureKind::Backend))
            .count(),
        metrics,
        excluded: scores.excluded().to_vec(),
        cost: cost_of(results, pricing, &entry.labels),
    }
}

/// Assembles the report for `entries`, whose results are given in the same
/// order.
pub fn build_report(
    config: &ExperimentConfig,
    entries: &[&StrategyEntry],
    test: &DatasetSplit,
    results: &[Vec<ScoredResult>],
    limit: Option<usize>,
) -> EvaluationReport {
    let pricing = config.pricing();
    EvaluationReport {
        config_hash: config.hash.clone(),
        template_versions: template_versions(),
        embedder: config.embedder.build().id(),
        limit,
        n_test: test.len(),
        strategies: entries
            .iter()
            .zip(results)
            .map(|(entry, results)| {
                let model = config.backend_model(&entry.config.backend).unwrap_or_default();
                strategy_report(entry, model, test, results, &pricing)
            })
            .collect(),
        external_rows: config.external_rows.clone(),
    }
}

fn cell(text: &str) -> String {
    text.replace('|', "\\|").replace("\r\n", "<br>").replace('\n', "<br>")
}

const TABLE_HEADER: &str = "| Approach | Model / Setting | Training / Prompting Scheme | k-shot | Accuracy | F1 | RMSE | MAE |\n|---|---|---|---|---:|---:|---:|---:|\n";

/// One results-table row.
pub fn table_row(report: &StrategyReport) -> String {
    let [acc, f1, rmse, mae] = match &report.metrics {
        Some(m) => m.table_cells(),
        None => ["n/a".to_owned(), "n/a".to_owned(), "n/a".to_owned(), "n/a".to_owned()],
    };
    format!(
        "| {} | {} | {} | {} | {acc} | {f1} | {rmse} | {mae} |",
        cell(&report.approach),
        cell(&report.model),
        cell(&report.scheme),
        report.k_shot_label()
    )
}

fn external_table_row(row: &ExternalRow) -> String {
    let k = if row.k_shot.is_empty() { "--" } else { &row.k_shot };
    format!(
        "| {} | {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |",
        cell(&row.approach),
        cell(&row.model),
        cell(&row.scheme),
        cell(k),
        row.accuracy,
        row.f1,
        row.rmse,
        row.mae
    )
}

/// Main results table, followed by exclusion counts per strategy.
pub fn results_markdown(report: &EvaluationReport) -> String {
    let mut out = String::from("# Results\n\n");
    out.push_str(TABLE_HEADER);
    for row in &report.external_rows {
        out.push_str(&external_table_row(row));
        out.push('\n');
    }
    for strategy in &report.strategies {
        out.push_str(&table_row(strategy));
        out.push('\n');
    }
    out.push_str(
        "\nAccuracy counts predictions within 0.5 band of gold. F1 is macro-averaged over the bands present.\n\n",
    );
    out.push_str("| Strategy | Scored | Excluded | Parse-failure rate | Acc@0 | Acc@0.5 | Acc@1.0 |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|---:|\n");
    for s in &report.strategies {
        let acc = |t: f64| {
            s.metrics.as_ref().and_then(|m| m.accuracy_at(t)).map_or("n/a".to_owned(), |a| format!("{a:.4}"))
        };
        let rate = if s.n_total == 0 { 0.0 } else { s.n_excluded as f64 / s.n_total as f64 };
        out.push_str(&format!(
            "| {} | {} | {} | {rate:.4} | {} | {} | {} |\n",
            cell(&s.name),
            s.n_scored,
            s.n_excluded,
            acc(0.0),
            acc(0.5),
            acc(1.0)
        ));
    }
    out
}

/// Shortest decimal form after rounding to four places.
fn short_number(x: f64) -> String {
    let rounded = (x * 10_000.0).round() / 10_000.0;
    format!("{rounded}")
}

/// `approach,accuracy,cost-hours,gpu-count`, one row per approach.
pub fn cost_accuracy_csv(report: &EvaluationReport) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["approach", "accuracy", "cost-hours", "gpu-count"]).expect("in-memory write");
    let gpu = |g: Option<u32>| g.map(|g| g.to_string()).unwrap_or_default();
    for row in &report.external_rows {
        let hours = row.training_hours.map(short_number).unwrap_or_default();
        writer
            .write_record([row.approach.clone(), short_number(row.accuracy), hours, gpu(row.gpu_count)])
            .expect("in-memory write");
    }
    for s in &report.strategies {
        let accuracy = s.metrics.as_ref().map(|m| short_number(m.accuracy)).unwrap_or_default();
        writer
            .write_record([s.approach.clone(), accuracy, short_number(s.cost.cost_hours()), gpu(s.cost.gpu_count)])
            .expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
}

fn excerpt(text: &str, words: usize) -> String {
    let all: Vec<&str> = text.split_whitespace().collect();
    let mut out = all[..all.len().min(words)].join(" ");
    out = out.trim_end_matches(['.', ',', ';', ':']).to_owned();
    format!("\"{out}...\"")
}

/// Per-essay comparison: topic, prompt excerpt, gold band, each strategy's
/// band and feedback.
pub fn case_study_markdown(
    entries: &[CaseStudyEntry],
    essays: &BTreeMap<String, Essay>,
    report: &EvaluationReport,
    results: &[Vec<ScoredResult>],
) -> String {
    let mut out = String::from("# Case study\n\n");
    out.push_str("| Topic | Essay Excerpt | Gold | Predicted Band | LLM Feedback (excerpt) |\n|---|---|---|---|---|\n");
    for entry in entries {
        let Some(essay) = essays.get(&entry.id) else {
            out.push_str(&format!("| {} | essay `{}` not found | | | |\n", cell(&entry.topic), cell(&entry.id)));
            continue;
        };
        let gold = essay.overall.map(|b| b.to_string()).unwrap_or_else(|| "n/a".into());
        let mut predicted = Vec::new();
        let mut feedback = Vec::new();
        for (strategy, results) in report.strategies.iter().zip(results) {
            let result = results.iter().find(|r| r.essay_id == entry.id);
            let band = result.and_then(|r| r.overall).map(|b| b.to_string()).unwrap_or_else(|| "n/a".into());
            predicted.push(format!("**{}**: {band}", cell(&strategy.approach)));
            let text = match result {
                Some(r) if !r.feedback.is_empty() => r.feedback.clone(),
                Some(r) => match &r.failure {
                    Some(f) => format!("({})", failure_label(f.kind)),
                    None => "(no feedback)".into(),
                },
                None => "(not scored)".into(),
            };
            feedback.push(format!("**{}**:<br>{}", cell(&strategy.approach), cell(&text)));
        }
        out.push_str(&format!(
            "| {} | {} | {gold} | {} | {} |\n",
            cell(&entry.topic),
            cell(&excerpt(&essay.prompt_text, 8)),
            predicted.join("<br>"),
            feedback.join("<br>")
        ));
    }
    out
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), RunError> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| RunError::Io { path: path.display().to_string(), source })
}

/// Writes `report.json`, `results.md`, `cost_accuracy.csv` and, when the
/// config lists case-study essays, `case_study.md`.
pub fn emit_report(
    report: &EvaluationReport,
    results: &[Vec<ScoredResult>],
    case_study: &[CaseStudyEntry],
    essays: &BTreeMap<String, Essay>,
    out_dir: &Path,
) -> Result<(), RunError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|source| RunError::Io { path: out_dir.display().to_string(), source })?;
    let json = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    write(out_dir, "report.json", &json)?;
    write(out_dir, "results.md", &results_markdown(report))?;
    write(out_dir, "cost_accuracy.csv", &cost_accuracy_csv(report))?;
    if !case_study.is_empty() {
        write(out_dir, "case_study.md", &case_study_markdown(case_study, essays, report, results))?;
    }
    Ok(())
}
