use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AnalyticEvaluation, Essay};
use crate::llm::{parse_regeneration, BackendError, BackendHandle, ParseError};
use crate::prompting::{render_regeneration, RenderError};
use crate::rubric::BandScore;

/// Largest accepted gap between the mean of the four regenerated bands and
/// the gold overall band.
pub const DEFAULT_MEAN_TOLERANCE: f64 = 0.25;

/// Why a regenerated evaluation was filtered out.
#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[serde(tag = "cause", rename_all = "snake_case")]
pub enum Rejection {
    #[error("output is not a valid evaluation object: {detail}")]
    InvalidJson { detail: String },
    #[error("inadmissible band: {detail}")]
    InadmissibleBand { detail: String },
    #[error("criterion mean {mean} is more than {tolerance} away from overall {overall}")]
    MeanConstraint { mean: f64, overall: BandScore, tolerance: f64 },
}

#[derive(Debug, Error)]
pub enum RegenError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("rejected: {0}")]
    Rejected(Rejection),
}

/// Asks the model for a full analytic evaluation conditioned on the essay's
/// gold overall band, then keeps it only if it parses, every band is
/// admissible and the criterion mean lies within `tolerance` of the gold band.
pub fn regenerate_analytic(
    essay: &Essay,
    backend: &BackendHandle,
    tolerance: f64,
) -> Result<AnalyticEvaluation, RegenError> {
    let overall = essay.overall.ok_or(RenderError::MissingOverall)?;
    let prompt = render_regeneration(essay, overall)?;
    let request = backend.request(prompt);
    let completion = backend.complete(&request)?;
    let evaluation = parse_regeneration(&completion.text).map_err(|err| {
        RegenError::Rejected(match err {
            ParseError::Inadmissible { .. } => Rejection::InadmissibleBand { detail: err.to_string() },
            other => Rejection::InvalidJson { detail: other.to_string() },
        })
    })?;
    let mean = evaluation.criteria().mean();
    if (mean - overall.value()).abs() > tolerance + 1e-9 {
        return Err(RegenError::Rejected(Rejection::MeanConstraint { mean, overall, tolerance }));
    }
    Ok(evaluation)
}

/// An essay with its accepted regenerated evaluation, flattened into the
/// per-criterion columns downstream training reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegeneratedRecord {
    pub id: String,
    pub prompt: String,
    pub essay: String,
    pub band: BandScore,
    #[serde(rename = "TR")]
    pub tr: BandScore,
    #[serde(rename = "CC")]
    pub cc: BandScore,
    #[serde(rename = "LR")]
    pub lr: BandScore,
    #[serde(rename = "GRA")]
    pub gra: BandScore,
    #[serde(rename = "TR_comment")]
    pub tr_comment: String,
    #[serde(rename = "CC_comment")]
    pub cc_comment: String,
    #[serde(rename = "LR_comment")]
    pub lr_comment: String,
    #[serde(rename = "GRA_comment")]
    pub gra_comment: String,
    pub evaluation: AnalyticEvaluation,
}

impl RegeneratedRecord {
    /// `None` when the essay has no gold overall band.
    pub fn new(essay: &Essay, evaluation: AnalyticEvaluation) -> Option<Self> {
        Some(RegeneratedRecord {
            id: essay.id.clone(),
            prompt: essay.prompt_text.clone(),
            essay: essay.essay_text.clone(),
            band: essay.overall?,
            tr: evaluation.task_response.band,
            cc: evaluation.coherence_and_cohesion.band,
            lr: evaluation.lexical_resource.band,
            gra: evaluation.grammatical_range_and_accuracy.band,
            tr_comment: evaluation.task_response.comment.clone(),
            cc_comment: evaluation.coherence_and_cohesion.comment.clone(),
            lr_comment: evaluation.lexical_resource.comment.clone(),
            gra_comment: evaluation.grammatical_range_and_accuracy.comment.clone(),
            evaluation,
        })
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::dataset::{validate_record, Source};
    use crate::llm::ScriptedBackend;

    fn regen_json(bands: [f64; 4]) -> String {
        format!(
            r#"{{"Task_Response": {{"Band": {}, "Comment": "a"}},
                "Coherence_and_Cohesion": {{"Band": {}, "Comment": "b"}},
                "Lexical_Resource": {{"Band": {}, "Mistakes": [], "Corrections": [], "Comment": "c"}},
                "Grammatical_Range_and_Accuracy": {{"Band": {}, "Mistakes": [], "Corrections": [], "Comment": "d"}},
                "Overall_Band_Score": 6.5, "General_Feedback": "fine"}}"#,
            bands[0], bands[1], bands[2], bands[3]
        )
    }

    fn handle(reply: String) -> BackendHandle {
        BackendHandle::new("s", "scripted", Arc::new(ScriptedBackend::new("s").with_pattern(".", reply).unwrap()))
    }

    fn essay(overall: f64) -> Essay {
        Essay::new("e1", "Some people think...", "I partly agree.").with_overall(BandScore::validate(overall).unwrap())
    }

    #[test]
    fn accepts_close_mean() {
        let eval = regenerate_analytic(&essay(6.5), &handle(regen_json([6.5, 6.5, 6.0, 6.5])), 0.25).unwrap();
        assert_eq!(eval.criteria().mean(), 6.375);
    }

    #[test]
    fn rejects_far_mean() {
        let err = regenerate_analytic(&essay(7.0), &handle(regen_json([5.0; 4])), 0.25).unwrap_err();
        assert!(matches!(err, RegenError::Rejected(Rejection::MeanConstraint { mean, .. }) if mean == 5.0));
    }

    #[test]
    fn rejects_unrecoverable_json() {
        let truncated = regen_json([6.0; 4]).trim_end_matches('}').to_owned();
        let err = regenerate_analytic(&essay(6.0), &handle(truncated), 0.25).unwrap_err();
        assert!(matches!(err, RegenError::Rejected(Rejection::InvalidJson { .. })));
    }

    #[test]
    fn requires_gold_band() {
        let unscored = Essay::new("e", "p", "t");
        assert!(matches!(
            regenerate_analytic(&unscored, &handle(String::new()), 0.25),
            Err(RegenError::Render(RenderError::MissingOverall))
        ));
    }

    #[test]
    fn regenerated_record_reingests() {
        let e = essay(6.5);
        let eval = regenerate_analytic(&e, &handle(regen_json([6.5, 6.5, 6.0, 6.5])), 0.25).unwrap();
        let record = RegeneratedRecord::new(&e, eval).unwrap();
        let value = serde_json::to_value(&record).unwrap();
        assert_eq!(value["TR"], 6.5);
        assert_eq!(value["evaluation"]["Lexical_Resource"]["Band"], 6.0);
        let back = validate_record(&value, Source::PrimaryCorpus).unwrap();
        assert_eq!(back.analytic.unwrap().lr, BandScore::validate(6.0).unwrap());
    }
}
