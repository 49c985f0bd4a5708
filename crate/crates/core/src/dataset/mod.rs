//! Essay corpora: record validation, ingestion, split assignment, split
//! statistics and analytic-score re-generation.

mod ingest;
mod regen;
mod stats;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rubric::{BandScore, CriterionComments, CriterionSet};

pub use ingest::{
    assign_splits, ingest_auxiliary, ingest_primary, load_split_manifest, validate_record, DropRecord,
    IngestReport, SplitAssignment, Violation,
};
pub use regen::{regenerate_analytic, RegenError, RegeneratedRecord, Rejection, DEFAULT_MEAN_TOLERANCE};
pub use stats::{split_stats, DatasetStats};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: required column `{column}` is missing")]
    Schema { path: String, column: String },
    #[error("{path}: {message}")]
    Malformed { path: String, message: String },
    #[error("duplicate essay id `{0}` within a split")]
    DuplicateId(String),
    #[error("split has no scored essays")]
    EmptySplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    PrimaryCorpus,
    AuxiliaryCorpus,
}

/// A prompt and the candidate's response, with whatever labels the corpus
/// carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Essay {
    pub id: String,
    pub prompt_text: String,
    pub essay_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overall: Option<BandScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analytic: Option<CriterionSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<String>,
    pub source: Source,
}

impl Essay {
    pub fn new(id: impl Into<String>, prompt_text: impl Into<String>, essay_text: impl Into<String>) -> Self {
        Essay {
            id: id.into(),
            prompt_text: prompt_text.into(),
            essay_text: essay_text.into(),
            overall: None,
            analytic: None,
            feedback: None,
            source: Source::PrimaryCorpus,
        }
    }

    pub fn with_overall(mut self, band: BandScore) -> Self {
        self.overall = Some(band);
        self
    }

    /// Text used for embedding and exemplar lookup: prompt, newline, essay.
    pub fn retrieval_text(&self) -> String {
        format!("{}\n{}", self.prompt_text, self.essay_text)
    }

    pub fn token_count(&self) -> usize {
        crate::llm::whitespace_tokens(&self.essay_text)
    }
}

/// One criterion block of an analytic evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionEvaluation {
    #[serde(rename = "Band")]
    pub band: BandScore,
    #[serde(rename = "Comment", default)]
    pub comment: String,
    #[serde(rename = "Mistakes", default, skip_serializing_if = "Vec::is_empty")]
    pub mistakes: Vec<String>,
    #[serde(rename = "Corrections", default, skip_serializing_if = "Vec::is_empty")]
    pub corrections: Vec<String>,
}

/// Full analytic evaluation in the re-generation output schema; field names
/// serialize exactly as the prompt asks the model to write them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyticEvaluation {
    #[serde(rename = "Task_Response")]
    pub task_response: CriterionEvaluation,
    #[serde(rename = "Coherence_and_Cohesion")]
    pub coherence_and_cohesion: CriterionEvaluation,
    #[serde(rename = "Lexical_Resource")]
    pub lexical_resource: CriterionEvaluation,
    #[serde(rename = "Grammatical_Range_and_Accuracy")]
    pub grammatical_range_and_accuracy: CriterionEvaluation,
    #[serde(rename = "Overall_Band_Score")]
    pub overall_band: BandScore,
    #[serde(rename = "General_Feedback", default)]
    pub general_feedback: String,
}

impl AnalyticEvaluation {
    /// The four bands with their comments.
    pub fn criteria(&self) -> CriterionSet {
        let non_empty = |s: &str| (!s.trim().is_empty()).then(|| s.to_owned());
        CriterionSet::new(
            self.task_response.band,
            self.coherence_and_cohesion.band,
            self.lexical_resource.band,
            self.grammatical_range_and_accuracy.band,
        )
        .with_comments(CriterionComments {
            tr: non_empty(&self.task_response.comment),
            cc: non_empty(&self.coherence_and_cohesion.comment),
            lr: non_empty(&self.lexical_resource.comment),
            gra: non_empty(&self.grammatical_range_and_accuracy.comment),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Test,
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Test => "test",
        })
    }
}

/// An ordered list of essays with unique ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: SplitName,
    essays: Vec<Essay>,
}

impl DatasetSplit {
    pub fn new(name: SplitName, essays: Vec<Essay>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::with_capacity(essays.len());
        for essay in &essays {
            if !seen.insert(essay.id.as_str()) {
                return Err(DatasetError::DuplicateId(essay.id.clone()));
            }
        }
        Ok(DatasetSplit { name, essays })
    }

    pub fn essays(&self) -> &[Essay] {
        &self.essays
    }

    pub fn len(&self) -> usize {
        self.essays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.essays.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Essay> {
        self.essays.iter().find(|e| e.id == id)
    }

    /// Keeps only the first `n` essays.
    pub fn truncate(&mut self, n: usize) {
        self.essays.truncate(n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_rejects_duplicate_ids() {
        let a = Essay::new("a", "p", "e");
        assert!(DatasetSplit::new(SplitName::Train, vec![a.clone(), Essay::new("b", "p", "e")]).is_ok());
        assert!(matches!(
            DatasetSplit::new(SplitName::Train, vec![a.clone(), a]),
            Err(DatasetError::DuplicateId(id)) if id == "a"
        ));
    }
}
