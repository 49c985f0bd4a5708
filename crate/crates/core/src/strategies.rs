//! The four scoring paradigms as interchangeable strategies.
//!
//! | kind                   | calls | prompt                                  | overall                  |
//! |------------------------|-------|-----------------------------------------|--------------------------|
//! | `final-band-prompting` | 1     | final-band, optional exemplars          | parsed directly          |
//! | `criterion-joint`      | 1     | four-key criterion prompt               | aggregated from criteria |
//! | `criterion-rag`        | 4     | one per criterion, retrieved context    | aggregated from criteria |
//! | `sft-dpo-rag`          | 1     | four-key criterion prompt with context  | aggregated from criteria |
//!
//! A strategy never panics on bad model output. Failures land in
//! [`ScoredResult::failure`] and every call made is kept in the trace.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetSplit, Essay};
use crate::llm::{
    parse_final_band, parse_joint_output, parse_single_criterion, BackendHandle, Fingerprint, ParsedValue,
    UsageEntry, Usage,
};
use crate::prompting::{
    render_criterion_joint, render_final_band, render_single_criterion_with_context, ContextBlock, Exemplar,
};
use crate::retrieval::{Embedder, RetrievalIndex};
use crate::rubric::{overall_from_criteria, BandScore, Criterion, CriterionComments, CriterionSet, RoundingRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    FinalBandPrompting,
    CriterionJoint,
    CriterionRag,
    SftDpoRag,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::FinalBandPrompting,
        StrategyKind::CriterionJoint,
        StrategyKind::CriterionRag,
        StrategyKind::SftDpoRag,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::FinalBandPrompting => "final-band-prompting",
            StrategyKind::CriterionJoint => "criterion-joint",
            StrategyKind::CriterionRag => "criterion-rag",
            StrategyKind::SftDpoRag => "sft-dpo-rag",
        }
    }

    pub fn calls_per_essay(self) -> usize {
        match self {
            StrategyKind::CriterionRag => 4,
            _ => 1,
        }
    }

    fn default_k(self) -> usize {
        match self {
            StrategyKind::CriterionRag | StrategyKind::SftDpoRag => 2,
            _ => 0,
        }
    }

    fn default_source(self, k: usize) -> ExemplarSource {
        match self {
            _ if k == 0 => ExemplarSource::None,
            StrategyKind::CriterionRag | StrategyKind::SftDpoRag => ExemplarSource::Retrieval,
            _ => ExemplarSource::FixedList,
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Where few-shot exemplars come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExemplarSource {
    /// Nearest training essays from the retrieval index.
    Retrieval,
    /// A seeded shuffle of the training split, the same for every query.
    FixedList,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Defaults to 2 for the retrieval-grounded kinds and 0 otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_shots: Option<usize>,
    /// Defaults to retrieval for the retrieval-grounded kinds, a fixed list
    /// otherwise, and none when `k_shots` is 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exemplar_source: Option<ExemplarSource>,
    /// Backend for every call unless a criterion override applies.
    pub backend: String,
    /// Per-criterion backend overrides, used by `criterion-rag` to route each
    /// criterion to its own adapter endpoint.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub criterion_backends: BTreeMap<Criterion, String>,
    #[serde(default)]
    pub rounding: RoundingRule,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StrategyError {
    #[error("{kind} with k_shots = {k} needs an exemplar source other than none")]
    MissingExemplarSource { kind: StrategyKind, k: usize },
    #[error("backend `{0}` is not defined")]
    UnknownBackend(String),
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind, backend: impl Into<String>) -> Self {
        StrategyConfig {
            kind,
            k_shots: None,
            exemplar_source: None,
            backend: backend.into(),
            criterion_backends: BTreeMap::new(),
            rounding: RoundingRule::default(),
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k_shots = Some(k);
        self
    }

    pub fn with_source(mut self, source: ExemplarSource) -> Self {
        self.exemplar_source = Some(source);
        self
    }

    pub fn with_criterion_backend(mut self, criterion: Criterion, backend: impl Into<String>) -> Self {
        self.criterion_backends.insert(criterion, backend.into());
        self
    }

    pub fn k_shots(&self) -> usize {
        self.k_shots.unwrap_or_else(|| self.kind.default_k())
    }

    pub fn exemplar_source(&self) -> ExemplarSource {
        self.exemplar_source.unwrap_or_else(|| self.kind.default_source(self.k_shots()))
    }

    pub fn backend_for(&self, criterion: Criterion) -> &str {
        self.criterion_backends.get(&criterion).unwrap_or(&self.backend)
    }

    /// Every backend name the strategy may call.
    pub fn backend_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = std::iter::once(self.backend.as_str())
            .chain(self.criterion_backends.values().map(String::as_str))
            .collect();
        names.sort_unstable();
        names.dedup();
        names
    }

    /// Checks the config and returns warnings for settings that are allowed
    /// but unusual.
    pub fn validate(&self) -> Result<Vec<String>, StrategyError> {
        let k = self.k_shots();
        if k > 0 && self.exemplar_source() == ExemplarSource::None {
            return Err(StrategyError::MissingExemplarSource { kind: self.kind, k });
        }
        let mut warnings = Vec::new();
        if ![0, 2, 4].contains(&k) {
            warnings.push(format!("k_shots = {k} is outside the usual 0, 2 or 4"));
        }
        if !self.criterion_backends.is_empty() && self.kind != StrategyKind::CriterionRag {
            warnings.push(format!("criterion_backends are ignored by {}", self.kind));
        }
        Ok(warnings)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExemplarError {
    #[error("retrieval failed: {0}")]
    Retrieval(String),
    #[error("retrieved id `{0}` has no essay in the index corpus")]
    Unresolved(String),
}

/// Supplies the exemplars shown to the model for each query essay.
#[derive(Clone)]
pub enum ExemplarPool {
    None,
    Retrieval { index: Arc<RetrievalIndex>, embedder: Arc<dyn Embedder> },
    FixedList { order: Vec<Exemplar> },
}

impl ExemplarPool {
    pub fn retrieval(index: Arc<RetrievalIndex>, embedder: Arc<dyn Embedder>) -> Self {
        ExemplarPool::Retrieval { index, embedder }
    }

    /// Scored essays of `train`, sorted by id then shuffled with `seed`.
    /// Every query sees the first `k` of this order that are not itself.
    pub fn fixed_list(train: &DatasetSplit, seed: u64) -> Self {
        let mut order: Vec<Exemplar> = train.essays().iter().filter_map(Exemplar::from_essay).collect();
        order.sort_by(|a, b| a.id.cmp(&b.id));
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        ExemplarPool::FixedList { order }
    }

    pub fn select(&self, essay: &Essay, k: usize) -> Result<ContextBlock, ExemplarError> {
        if k == 0 {
            return Ok(ContextBlock::default());
        }
        match self {
            ExemplarPool::None => Ok(ContextBlock::default()),
            ExemplarPool::FixedList { order } => {
                Ok(ContextBlock::new(order.iter().filter(|e| e.id != essay.id).take(k).cloned().collect()))
            }
            ExemplarPool::Retrieval { index, embedder } => {
                let hits = index
                    .retrieve(essay, embedder.as_ref(), k)
                    .map_err(|e| ExemplarError::Retrieval(e.to_string()))?;
                hits.iter()
                    .map(|hit| {
                        index
                            .essay(&hit.id)
                            .and_then(Exemplar::from_essay)
                            .ok_or_else(|| ExemplarError::Unresolved(hit.id.clone()))
                    })
                    .collect::<Result<Vec<_>, _>>()
                    .map(ContextBlock::new)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// The model answered but no admissible band could be read.
    Parse,
    /// A call failed at the transport, auth, rate-limit or fixture level.
    Backend,
    /// The prompt could not be rendered.
    Render,
    /// Exemplars could not be selected.
    Retrieval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub kind: FailureKind,
    pub detail: String,
}

/// One model call as recorded in the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallTrace {
    /// `overall`, `joint`, or a criterion tag.
    pub label: String,
    pub backend: String,
    pub model: String,
    pub fingerprint: Fingerprint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed: Option<ParsedValue>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A strategy's verdict on one essay with the full call trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredResult {
    pub essay_id: String,
    pub strategy: String,
    pub kind: StrategyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overall: Option<BandScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criteria: Option<CriterionSet>,
    /// Unrounded criterion mean, kept so the rounding step can be audited.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criterion_mean: Option<f64>,
    pub feedback: String,
    pub exemplar_ids: Vec<String>,
    pub calls: Vec<CallTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
}

impl ScoredResult {
    fn new(essay: &Essay, strategy: &str, kind: StrategyKind) -> Self {
        ScoredResult {
            essay_id: essay.id.clone(),
            strategy: strategy.to_owned(),
            kind,
            overall: None,
            criteria: None,
            criterion_mean: None,
            feedback: String::new(),
            exemplar_ids: Vec::new(),
            calls: Vec::new(),
            failure: None,
        }
    }

    fn fail(&mut self, kind: FailureKind, detail: impl Into<String>) {
        if self.failure.is_none() {
            self.failure = Some(Failure { kind, detail: detail.into() });
        }
    }

    fn set_criteria(&mut self, criteria: CriterionSet, rule: RoundingRule) {
        let aggregate = overall_from_criteria(&criteria, rule);
        self.overall = Some(aggregate.overall);
        self.criterion_mean = Some(aggregate.mean);
        self.criteria = Some(criteria);
    }

    pub fn is_failure(&self) -> bool {
        self.failure.is_some()
    }

    /// Token usage of every answered call, for cost accounting.
    pub fn usage_entries(&self) -> Vec<UsageEntry> {
        self.calls
            .iter()
            .filter_map(|c| {
                c.usage.map(|usage| UsageEntry { model: c.model.clone(), usage, latency_ms: c.latency_ms })
            })
            .collect()
    }
}

/// A named strategy bound to its backends.
#[derive(Debug, Clone)]
pub struct Strategy {
    pub name: String,
    pub config: StrategyConfig,
    default: BackendHandle,
    per_criterion: BTreeMap<Criterion, BackendHandle>,
}

impl Strategy {
    /// Resolves every backend the config names in `backends`.
    pub fn new(
        name: impl Into<String>,
        config: StrategyConfig,
        backends: &BTreeMap<String, BackendHandle>,
    ) -> Result<Self, StrategyError> {
        let lookup =
            |name: &str| backends.get(name).cloned().ok_or_else(|| StrategyError::UnknownBackend(name.to_owned()));
        let default = lookup(&config.backend)?;
        let per_criterion = config
            .criterion_backends
            .iter()
            .map(|(c, name)| Ok((*c, lookup(name)?)))
            .collect::<Result<_, StrategyError>>()?;
        Ok(Strategy { name: name.into(), config, default, per_criterion })
    }

    /// A strategy whose every call goes to `backend`.
    pub fn single(name: impl Into<String>, mut config: StrategyConfig, backend: BackendHandle) -> Self {
        config.backend = backend.name.clone();
        config.criterion_backends.clear();
        Strategy { name: name.into(), config, default: backend, per_criterion: BTreeMap::new() }
    }

    fn route(&self, criterion: Criterion) -> &BackendHandle {
        self.per_criterion.get(&criterion).unwrap_or(&self.default)
    }

    pub fn score(&self, essay: &Essay, pool: &ExemplarPool) -> ScoredResult {
        let mut result = ScoredResult::new(essay, &self.name, self.config.kind);
        let source = self.config.exemplar_source();
        let ctx = match source {
            ExemplarSource::None => Ok(ContextBlock::default()),
            _ => pool.select(essay, self.config.k_shots()),
        };
        let ctx = match ctx {
            Ok(ctx) => ctx,
            Err(e) => {
                result.fail(FailureKind::Retrieval, e.to_string());
                return result;
            }
        };
        result.exemplar_ids = ctx.ids();
        match self.config.kind {
            StrategyKind::FinalBandPrompting => self.final_band(essay, &ctx, &mut result),
            StrategyKind::CriterionJoint | StrategyKind::SftDpoRag => self.joint(essay, &ctx, &mut result),
            StrategyKind::CriterionRag => self.per_criterion(essay, &ctx, &mut result),
        }
        result
    }

    /// Issues one call and records it. Returns the completion text when the
    /// backend answered.
    fn call(&self, backend: &BackendHandle, label: &str, prompt: String, result: &mut ScoredResult) -> Option<String> {
        let request = backend.request(prompt);
        let mut trace = CallTrace {
            label: label.to_owned(),
            backend: backend.name.clone(),
            model: backend.model.clone(),
            fingerprint: request.fingerprint(),
            completion: None,
            usage: None,
            latency_ms: 0,
            parsed: None,
            warnings: Vec::new(),
            error: None,
        };
        let text = match backend.complete(&request) {
            Ok(completion) => {
                trace.usage = Some(completion.usage);
                trace.latency_ms = completion.latency_ms;
                trace.completion = Some(completion.text.clone());
                Some(completion.text)
            }
            Err(e) => {
                trace.error = Some(e.to_string());
                result.fail(FailureKind::Backend, format!("{label}: {e}"));
                None
            }
        };
        result.calls.push(trace);
        text
    }

    fn record_parse_error(result: &mut ScoredResult, label: &str, error: String) {
        if let Some(trace) = result.calls.last_mut() {
            trace.error = Some(error.clone());
        }
        result.fail(FailureKind::Parse, format!("{label}: {error}"));
    }

    fn final_band(&self, essay: &Essay, ctx: &ContextBlock, result: &mut ScoredResult) {
        let prompt = match render_final_band(essay, ctx) {
            Ok(p) => p,
            Err(e) => return result.fail(FailureKind::Render, e.to_string()),
        };
        let Some(text) = self.call(&self.default, "overall", prompt, result) else { return };
        match parse_final_band(&text) {
            Ok(parsed) => {
                let trace = result.calls.last_mut().expect("call was recorded");
                trace.parsed = Some(ParsedValue::FinalBand { band: parsed.band });
                if parsed.multiple_candidates {
                    trace.warnings.push("multiple_candidates".into());
                }
                result.overall = Some(parsed.band);
                result.feedback = text.trim().to_owned();
            }
            Err(e) => Self::record_parse_error(result, "overall", e.to_string()),
        }
    }

    fn joint(&self, essay: &Essay, ctx: &ContextBlock, result: &mut ScoredResult) {
        let prompt = match render_criterion_joint(essay, ctx) {
            Ok(p) => p,
            Err(e) => return result.fail(FailureKind::Render, e.to_string()),
        };
        let Some(text) = self.call(&self.default, "joint", prompt, result) else { return };
        match parse_joint_output(&text) {
            Ok(joint) => {
                result.calls.last_mut().expect("call was recorded").parsed =
                    Some(ParsedValue::CriterionJoint { criteria: joint.criteria.clone() });
                result.feedback = joint.feedback.clone().unwrap_or_else(|| labelled_comments(&joint.criteria.comments));
                result.set_criteria(joint.criteria, self.config.rounding);
            }
            Err(e) => Self::record_parse_error(result, "joint", e.to_string()),
        }
    }

    /// Four calls, one per criterion, sharing one set of exemplars. Every
    /// call is made even after a failure so the trace is complete, but any
    /// failure leaves the result without an overall band.
    fn per_criterion(&self, essay: &Essay, ctx: &ContextBlock, result: &mut ScoredResult) {
        let mut bands = Vec::with_capacity(4);
        let mut comments = CriterionComments::default();
        for criterion in Criterion::ALL {
            let label = criterion.tag();
            let prompt = match render_single_criterion_with_context(criterion, essay, ctx) {
                Ok(p) => p,
                Err(e) => return result.fail(FailureKind::Render, e.to_string()),
            };
            let Some(text) = self.call(self.route(criterion), label, prompt, result) else { continue };
            match parse_single_criterion(&text, criterion) {
                Ok((band, comment)) => {
                    result.calls.last_mut().expect("call was recorded").parsed =
                        Some(ParsedValue::SingleCriterion { criterion, band, comment: comment.clone() });
                    bands.push(band);
                    comments.set(criterion, comment);
                }
                Err(e) => Self::record_parse_error(result, label, e.to_string()),
            }
        }
        if result.failure.is_some() {
            return;
        }
        let criteria = CriterionSet::new(bands[0], bands[1], bands[2], bands[3]).with_comments(comments);
        result.feedback = labelled_comments(&criteria.comments);
        result.set_criteria(criteria, self.config.rounding);
    }
}

/// `Task Response: …` lines for every criterion that has a comment.
pub fn labelled_comments(comments: &CriterionComments) -> String {
    Criterion::ALL
        .iter()
        .filter_map(|&c| comments.get(c).map(|text| format!("{}: {}", c.full_name(), text.trim())))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SplitName;
    use crate::llm::{BackendError, ScriptedBackend};
    use crate::retrieval::HashingEmbedder;

    fn band(x: f64) -> BandScore {
        BandScore::validate(x).unwrap()
    }

    fn essay() -> Essay {
        Essay::new("q", "Some people think computers should replace teachers.", "I disagree with this view.")
            .with_overall(band(6.5))
    }

    fn train() -> DatasetSplit {
        let essays = (0..6)
            .map(|i| {
                Essay::new(format!("t{i}"), format!("Prompt about topic {i}"), format!("Training essay number {i}."))
                    .with_overall(band(5.0 + i as f64 * 0.5))
            })
            .collect();
        DatasetSplit::new(SplitName::Train, essays).unwrap()
    }

    fn scripted(fixtures: &[(&str, &str)]) -> (Arc<ScriptedBackend>, BackendHandle) {
        let mut backend = ScriptedBackend::new("s");
        for (pattern, reply) in fixtures {
            backend = backend.with_pattern(pattern, *reply).unwrap();
        }
        let backend = Arc::new(backend);
        (backend.clone(), BackendHandle::new("s", "scripted-model", backend))
    }

    const RAG_FIXTURES: [(&str, &str); 4] = [
        (r"criterion Task Response", r#"{"score": 6.5}"#),
        (r"criterion Coherence and Cohesion", r#"{"score": 6.5, "comment": "Logical paragraphing."}"#),
        (r"criterion Lexical Resource", r#"{"score": 6.0, "comment": "Adequate range."}"#),
        (r"criterion Grammatical Range", r#"{"score": 6.5, "comment": "Mostly accurate."}"#),
    ];

    #[test]
    fn final_band_pass_through() {
        let (backend, handle) = scripted(&[("ESSAY TO EVALUATE", "6.5")]);
        let strategy = Strategy::single("a2", StrategyConfig::new(StrategyKind::FinalBandPrompting, "s"), handle);
        let result = strategy.score(&essay(), &ExemplarPool::None);
        assert_eq!(result.overall, Some(band(6.5)));
        assert!(result.criteria.is_none());
        assert_eq!(backend.calls(), 1);
    }

    #[test]
    fn final_band_prose_is_parse_failure() {
        let (_, handle) = scripted(&[(".", "I cannot grade this essay.")]);
        let strategy = Strategy::single("a2", StrategyConfig::new(StrategyKind::FinalBandPrompting, "s"), handle);
        let result = strategy.score(&essay(), &ExemplarPool::None);
        assert_eq!(result.overall, None);
        assert_eq!(result.failure.unwrap().kind, FailureKind::Parse);
        assert_eq!(result.calls.len(), 1);
    }

    #[test]
    fn final_band_fixed_list_two_shot() {
        let (backend, handle) = scripted(&[(".", "Band: 6.0")]);
        let config = StrategyConfig::new(StrategyKind::FinalBandPrompting, "s").with_k(2);
        assert_eq!(config.exemplar_source(), ExemplarSource::FixedList);
        let strategy = Strategy::single("a2", config, handle);
        let pool = ExemplarPool::fixed_list(&train(), 7);
        let result = strategy.score(&essay(), &pool);
        assert_eq!(result.exemplar_ids.len(), 2);
        assert!(result.exemplar_ids.iter().all(|id| id.starts_with('t')));
        let prompt = &backend.prompts()[0];
        assert_eq!(prompt.matches("\nBand: ").count(), 2);
        assert_eq!(strategy.score(&essay(), &pool).exemplar_ids, result.exemplar_ids);
    }

    #[test]
    fn fixed_list_skips_query() {
        let pool = ExemplarPool::fixed_list(&train(), 3);
        let first = pool.select(&train().essays()[0], 6).unwrap();
        let ExemplarPool::FixedList { order } = &pool else { unreachable!() };
        let query = &order[0].id;
        let skipped = pool.select(train().get(query).unwrap(), 2).unwrap();
        assert!(!skipped.ids().contains(query));
        assert_eq!(skipped.ids(), order[1..3].iter().map(|e| e.id.clone()).collect::<Vec<_>>());
        assert_eq!(first.len(), 5);
    }

    #[test]
    fn criterion_joint_aggregates() {
        let reply = r#"{"TR_Band": 6.5, "CC_Band": 6.5, "LR_Band": 6.0, "GRA_Band": 6.5}"#;
        let (_, handle) = scripted(&[("NEW ESSAY TO GRADE", reply)]);
        let strategy = Strategy::single("j", StrategyConfig::new(StrategyKind::CriterionJoint, "s"), handle);
        let result = strategy.score(&essay(), &ExemplarPool::None);
        assert_eq!(result.overall, Some(band(6.5)));
        assert_eq!(result.criterion_mean, Some(6.375));

        let (_, handle) = scripted(&[(".", r#"{"TR_Band": 6, "CC_Band": 6, "LR_Band": 6}"#)]);
        let strategy = Strategy::single("j", StrategyConfig::new(StrategyKind::CriterionJoint, "s"), handle);
        let failed = strategy.score(&essay(), &ExemplarPool::None);
        assert_eq!(failed.failure.unwrap().kind, FailureKind::Parse);
        assert!(failed.calls[0].error.as_deref().unwrap().contains("GRA_Band"));
    }

    #[test]
    fn criterion_rag_four_calls_and_feedback() {
        let (backend, handle) = scripted(&RAG_FIXTURES);
        let config = StrategyConfig::new(StrategyKind::CriterionRag, "s").with_k(0);
        let strategy = Strategy::single("a3", config, handle);
        let result = strategy.score(&essay(), &ExemplarPool::None);
        assert_eq!(result.overall, Some(band(6.5)));
        assert_eq!(backend.calls(), 4);
        assert_eq!(
            result.feedback,
            "Coherence and Cohesion: Logical paragraphing.\nLexical Resource: Adequate range.\nGrammatical Range and Accuracy: Mostly accurate."
        );
        let labels: Vec<_> = result.calls.iter().map(|c| c.label.as_str()).collect();
        assert_eq!(labels, ["TR", "CC", "LR", "GRA"]);
    }

    #[test]
    fn criterion_rag_no_partial_aggregation() {
        let (backend, handle) = scripted(&RAG_FIXTURES[1..]);
        let config = StrategyConfig::new(StrategyKind::CriterionRag, "s").with_k(0);
        let result = Strategy::single("a3", config, handle).score(&essay(), &ExemplarPool::None);
        assert_eq!(result.overall, None);
        assert!(result.criteria.is_none());
        assert_eq!(result.failure.as_ref().unwrap().kind, FailureKind::Backend);
        assert_eq!(result.calls.len(), 4);
        assert_eq!(backend.calls(), 4);
        assert!(result.calls[0].error.as_deref().unwrap().contains("no scripted completion"));
    }

    #[test]
    fn criterion_rag_routes_and_retrieves_once() {
        let (shared, shared_handle) = scripted(&RAG_FIXTURES);
        let gra = Arc::new(ScriptedBackend::new("gra").with_pattern(".", r#"{"score": 7.0, "comment": "x"}"#).unwrap());
        let mut backends = BTreeMap::new();
        backends.insert("s".to_owned(), shared_handle);
        backends.insert("gra".to_owned(), BackendHandle::new("gra", "adapter-gra", gra.clone()));
        let config = StrategyConfig::new(StrategyKind::CriterionRag, "s")
            .with_criterion_backend(Criterion::GrammaticalRangeAccuracy, "gra");
        let strategy = Strategy::new("a3", config, &backends).unwrap();
        let embedder: Arc<dyn Embedder> = Arc::new(HashingEmbedder::new(64));
        let index = Arc::new(RetrievalIndex::build(&train(), embedder.as_ref()).unwrap());
        let result = strategy.score(&essay(), &ExemplarPool::retrieval(index, embedder));
        assert_eq!((shared.calls(), gra.calls()), (3, 1));
        assert_eq!(result.exemplar_ids.len(), 2);
        for prompt in shared.prompts().iter().chain(gra.prompts().iter()) {
            assert!(prompt.starts_with("CONTEXT (Reference Essays with Scores):\n"));
            assert_eq!(prompt.matches("\nBand: ").count(), 2);
        }
        assert_eq!(result.calls[3].model, "adapter-gra");
        // 6.5 + 6.5 + 6.0 + 7.0 = 26 → mean 6.5
        assert_eq!(result.overall, Some(band(6.5)));
    }

    #[test]
    fn sft_dpo_uses_joint_prompt_with_context() {
        let reply = r#"{"TR_Band": 6, "CC_Band": 6, "LR_Band": 6, "GRA_Band": 6, "Feedback": "Clear position."}"#;
        let (backend, handle) = scripted(&[("NEW ESSAY TO GRADE", reply)]);
        let strategy = Strategy::single("a4", StrategyConfig::new(StrategyKind::SftDpoRag, "s"), handle);
        let embedder: Arc<dyn Embedder> = Arc::new(HashingEmbedder::new(64));
        let index = Arc::new(RetrievalIndex::build(&train(), embedder.as_ref()).unwrap());
        let result = strategy.score(&essay(), &ExemplarPool::retrieval(index, embedder));
        assert_eq!(result.overall, Some(band(6.0)));
        assert_eq!(result.feedback, "Clear position.");
        assert!(backend.prompts()[0].contains("CONTEXT (Reference Essays with Scores):"));
    }

    #[test]
    fn backend_error_surfaces() {
        struct Down;
        impl crate::llm::Backend for Down {
            fn id(&self) -> &str {
                "down"
            }
            fn complete(&self, _: &crate::llm::GenerationRequest) -> Result<crate::llm::Completion, BackendError> {
                Err(BackendError::Transport("connection refused".into()))
            }
        }
        let handle = BackendHandle::new("down", "m", Arc::new(Down));
        let result = Strategy::single("a4", StrategyConfig::new(StrategyKind::SftDpoRag, "down").with_k(0), handle)
            .score(&essay(), &ExemplarPool::None);
        let failure = result.failure.unwrap();
        assert_eq!(failure.kind, FailureKind::Backend);
        assert!(failure.detail.contains("connection refused"));
    }

    #[test]
    fn config_validation() {
        let bad = StrategyConfig::new(StrategyKind::CriterionRag, "s").with_source(ExemplarSource::None);
        assert_eq!(bad.validate(), Err(StrategyError::MissingExemplarSource { kind: StrategyKind::CriterionRag, k: 2 }));
        let odd = StrategyConfig::new(StrategyKind::FinalBandPrompting, "s").with_k(3);
        assert_eq!(odd.validate().unwrap().len(), 1);
        let parsed: StrategyConfig = serde_json::from_str(
            r#"{"kind": "criterion-rag", "backend": "base", "criterion_backends": {"TR": "tr-adapter"}}"#,
        )
        .unwrap();
        assert_eq!(parsed.k_shots(), 2);
        assert_eq!(parsed.exemplar_source(), ExemplarSource::Retrieval);
        assert_eq!(parsed.backend_for(Criterion::TaskResponse), "tr-adapter");
        assert_eq!(parsed.backend_for(Criterion::LexicalResource), "base");
        assert_eq!(parsed.backend_names(), ["base", "tr-adapter"]);
        assert!(matches!(
            Strategy::new("x", parsed, &BTreeMap::new()),
            Err(StrategyError::UnknownBackend(name)) if name == "base"
        ));
    }
}
