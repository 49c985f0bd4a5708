//! Prompt rendering for every scoring and re-generation template.
//!
//! Template bodies live as UTF-8/LF text assets under `templates/` and are
//! compiled into the crate. Rendering is a pure function of the template,
//! the essay and the exemplars: the same inputs give byte-identical prompts.

mod template;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Essay;
use crate::rubric::{BandScore, Criterion, CriterionSet};

pub use template::{placeholders, substitute, RenderError};

const FINAL_BAND: &str = include_str!("../../templates/final_band.txt");
const CRITERION_JOINT: &str = include_str!("../../templates/criterion_joint.txt");
const CRITERION_TR: &str = include_str!("../../templates/criterion_tr.txt");
const CRITERION_CC: &str = include_str!("../../templates/criterion_cc.txt");
const CRITERION_LR: &str = include_str!("../../templates/criterion_lr.txt");
const CRITERION_GRA: &str = include_str!("../../templates/criterion_gra.txt");
const REGENERATION: &str = include_str!("../../templates/regeneration.txt");
const CONTEXT_SECTION: &str = include_str!("../../templates/context_section.txt");
const EXEMPLAR: &str = include_str!("../../templates/exemplar.txt");
const QUESTION: &str = include_str!("../../templates/question.txt");

const EXEMPLAR_SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    FinalBand,
    CriterionJoint,
    SingleCriterion(Criterion),
    Regeneration,
}

/// A template body with its kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub body: &'static str,
}

impl PromptTemplate {
    pub fn get(kind: TemplateKind) -> PromptTemplate {
        let body = match kind {
            TemplateKind::FinalBand => FINAL_BAND,
            TemplateKind::CriterionJoint => CRITERION_JOINT,
            TemplateKind::SingleCriterion(Criterion::TaskResponse) => CRITERION_TR,
            TemplateKind::SingleCriterion(Criterion::CoherenceCohesion) => CRITERION_CC,
            TemplateKind::SingleCriterion(Criterion::LexicalResource) => CRITERION_LR,
            TemplateKind::SingleCriterion(Criterion::GrammaticalRangeAccuracy) => CRITERION_GRA,
            TemplateKind::Regeneration => REGENERATION,
        };
        PromptTemplate { kind, body }
    }

    pub fn all() -> Vec<PromptTemplate> {
        let mut kinds = vec![TemplateKind::FinalBand, TemplateKind::CriterionJoint];
        kinds.extend(Criterion::ALL.map(TemplateKind::SingleCriterion));
        kinds.push(TemplateKind::Regeneration);
        kinds.into_iter().map(PromptTemplate::get).collect()
    }

    pub fn name(&self) -> String {
        match self.kind {
            TemplateKind::FinalBand => "final-band".into(),
            TemplateKind::CriterionJoint => "criterion-joint".into(),
            TemplateKind::SingleCriterion(c) => format!("single-criterion-{}", c.tag().to_ascii_lowercase()),
            TemplateKind::Regeneration => "regeneration".into(),
        }
    }

    /// Short content hash; changes whenever the template text does.
    pub fn version(&self) -> String {
        short_hash(self.body)
    }
}

fn short_hash(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..6])
}

/// Template name → version for run metadata, including the shared
/// context, exemplar and question fragments.
pub fn template_versions() -> BTreeMap<String, String> {
    let mut versions: BTreeMap<String, String> =
        PromptTemplate::all().iter().map(|t| (t.name(), t.version())).collect();
    versions.insert("context-section".into(), short_hash(CONTEXT_SECTION));
    versions.insert("exemplar".into(), short_hash(EXEMPLAR));
    versions.insert("question".into(), short_hash(QUESTION));
    versions
}

/// A scored reference essay shown to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub id: String,
    pub prompt_text: String,
    pub essay_text: String,
    pub band: BandScore,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criteria: Option<CriterionSet>,
}

impl Exemplar {
    /// `None` when the essay has no gold overall band.
    pub fn from_essay(essay: &Essay) -> Option<Exemplar> {
        Some(Exemplar {
            id: essay.id.clone(),
            prompt_text: essay.prompt_text.clone(),
            essay_text: essay.essay_text.clone(),
            band: essay.overall?,
            criteria: essay.analytic.clone(),
        })
    }
}

/// Ordered exemplars for one prompt; empty means zero-shot.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextBlock {
    pub exemplars: Vec<Exemplar>,
}

impl ContextBlock {
    pub fn new(exemplars: Vec<Exemplar>) -> Self {
        ContextBlock { exemplars }
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.exemplars.iter().map(|e| e.id.clone()).collect()
    }
}

fn lf(text: &str) -> String {
    text.replace("\r\n", "\n").replace('\r', "\n")
}

/// One exemplar as `Prompt: …\nEssay: …\nBand: <score>`.
pub fn format_exemplar(exemplar: &Exemplar) -> String {
    let band = exemplar.band.to_string();
    substitute(
        EXEMPLAR,
        &[
            ("essay_prompt", &lf(&exemplar.prompt_text)),
            ("essay_text", &lf(&exemplar.essay_text)),
            ("band", &band),
        ],
    )
    .expect("exemplar template binds all of its placeholders")
}

fn check_essay(essay: &Essay) -> Result<(), RenderError> {
    if essay.essay_text.trim().is_empty() {
        return Err(RenderError::EmptyText("essay"));
    }
    Ok(())
}

fn check_context(essay: &Essay, ctx: &ContextBlock) -> Result<(), RenderError> {
    match ctx.exemplars.iter().find(|e| e.id == essay.id) {
        Some(e) => Err(RenderError::SelfExemplar(e.id.clone())),
        None => Ok(()),
    }
}

/// The `CONTEXT` section for `ctx`, or nothing for zero-shot.
pub fn context_section(ctx: &ContextBlock) -> String {
    if ctx.is_empty() {
        return String::new();
    }
    let body = ctx.exemplars.iter().map(format_exemplar).collect::<Vec<_>>().join(EXEMPLAR_SEPARATOR);
    substitute(CONTEXT_SECTION, &[("context", &body)]).expect("context template binds all of its placeholders")
}

fn question(essay: &Essay) -> String {
    substitute(
        QUESTION,
        &[("essay_prompt", &lf(&essay.prompt_text)), ("essay_text", &lf(&essay.essay_text))],
    )
    .expect("question template binds all of its placeholders")
}

fn render_with_context(body: &str, essay: &Essay, ctx: &ContextBlock) -> Result<String, RenderError> {
    check_essay(essay)?;
    check_context(essay, ctx)?;
    substitute(body, &[("context_section", &context_section(ctx)), ("question", &question(essay))])
}

/// Direct overall-band prompt, with an optional exemplar context.
pub fn render_final_band(essay: &Essay, ctx: &ContextBlock) -> Result<String, RenderError> {
    render_with_context(FINAL_BAND, essay, ctx)
}

/// Four-criterion prompt asking for `TR_Band`, `CC_Band`, `LR_Band` and
/// `GRA_Band` in one JSON object.
pub fn render_criterion_joint(essay: &Essay, ctx: &ContextBlock) -> Result<String, RenderError> {
    render_with_context(CRITERION_JOINT, essay, ctx)
}

/// Single-criterion instruction. These templates have no context slot.
pub fn render_single_criterion(criterion: Criterion, essay: &Essay) -> Result<String, RenderError> {
    check_essay(essay)?;
    let body = PromptTemplate::get(TemplateKind::SingleCriterion(criterion)).body;
    substitute(
        body,
        &[("essay_prompt", &lf(&essay.prompt_text)), ("essay_text", &lf(&essay.essay_text))],
    )
}

/// Single-criterion instruction preceded by the `CONTEXT` section, the form
/// used when criterion calls are grounded on retrieved exemplars.
pub fn render_single_criterion_with_context(
    criterion: Criterion,
    essay: &Essay,
    ctx: &ContextBlock,
) -> Result<String, RenderError> {
    check_context(essay, ctx)?;
    let instruction = render_single_criterion(criterion, essay)?;
    Ok(format!("{}{}", context_section(ctx), instruction))
}

/// Analytic re-generation prompt conditioned on the gold overall band.
pub fn render_regeneration(essay: &Essay, overall: BandScore) -> Result<String, RenderError> {
    check_essay(essay)?;
    let band = overall.to_string();
    substitute(
        REGENERATION,
        &[
            ("overall_band", &band),
            ("essay_prompt", &lf(&essay.prompt_text)),
            ("essay_text", &lf(&essay.essay_text)),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn band(x: f64) -> BandScore {
        BandScore::validate(x).unwrap()
    }

    fn essay() -> Essay {
        Essay::new("q1", "Some people think computers should replace teachers.", "I disagree.\nTeachers matter.")
    }

    fn ctx(n: usize) -> ContextBlock {
        ContextBlock::new(
            (0..n)
                .map(|i| Exemplar {
                    id: format!("ex{i}"),
                    prompt_text: format!("Prompt {i}"),
                    essay_text: format!("Exemplar essay {i}"),
                    band: band(5.0 + i as f64),
                    criteria: None,
                })
                .collect(),
        )
    }

    #[test]
    fn templates_are_lf_and_fully_bound() {
        for template in PromptTemplate::all() {
            assert!(!template.body.contains('\r'), "{}", template.name());
        }
        let e = essay();
        let rendered = [
            render_final_band(&e, &ctx(2)).unwrap(),
            render_criterion_joint(&e, &ctx(0)).unwrap(),
            render_regeneration(&e, band(6.5)).unwrap(),
        ];
        for text in rendered.iter().chain(Criterion::ALL.map(|c| render_single_criterion(c, &e).unwrap()).iter()) {
            assert!(!text.contains("${"), "{text}");
        }
    }

    #[test]
    fn final_band_zero_and_few_shot() {
        let zero = render_final_band(&essay(), &ContextBlock::default()).unwrap();
        assert!(!zero.contains("CONTEXT"));
        assert!(zero.starts_with("You are a certified IELTS Writing Task 2 examiner."));
        assert!(zero.trim_end().ends_with("Return only the final overall band score (e.g., 6.5)."));

        let two = render_final_band(&essay(), &ctx(2)).unwrap();
        assert_eq!(two.matches("\nBand: ").count(), 2);
        assert!(two.contains("Essay: Exemplar essay 0\nBand: 5.0\n\nPrompt: Prompt 1"));
        let (role, rest) = two.split_once("CONTEXT (Reference Essays with Scores):").unwrap();
        assert!(role.contains("examiner"));
        let (context, tail) = rest.split_once("ESSAY TO EVALUATE:").unwrap();
        assert!(context.contains("Band: 6.0"));
        assert!(tail.contains("I disagree.\nTeachers matter.") && tail.contains("RESPONSE FORMAT:"));
    }

    #[test]
    fn essay_text_is_not_resubstituted() {
        let mut e = essay();
        e.essay_text = "Costs ${question} and ${context}".into();
        let out = render_final_band(&e, &ctx(1)).unwrap();
        assert!(out.contains("Essay: Costs ${question} and ${context}"));
    }

    #[test]
    fn criterion_joint_layout() {
        let out = render_criterion_joint(&essay(), &ctx(2)).unwrap();
        assert_eq!(out.matches("TR_Band, CC_Band, LR_Band, GRA_Band").count(), 1);
        assert!(out.find("CONTEXT").unwrap() < out.find("NEW ESSAY TO GRADE").unwrap());
        let mut empty = essay();
        empty.essay_text = "  ".into();
        assert_eq!(render_criterion_joint(&empty, &ctx(0)), Err(RenderError::EmptyText("essay")));
    }

    #[test]
    fn single_criterion_schemas() {
        let tr = render_single_criterion(Criterion::TaskResponse, &essay()).unwrap();
        assert_eq!(tr.lines().last().unwrap(), r#"{"score": float}"#);
        assert!(tr.contains("focusing ONLY on the criterion Task Response (TR)."));
        for c in [Criterion::CoherenceCohesion, Criterion::LexicalResource, Criterion::GrammaticalRangeAccuracy] {
            let out = render_single_criterion(c, &essay()).unwrap();
            assert_eq!(out.lines().last().unwrap(), r#"{"score": float, "comment": string}"#);
            assert!(out.contains(c.full_name()));
            assert!(!out.contains("CONTEXT"));
        }
        let grounded = render_single_criterion_with_context(Criterion::GrammaticalRangeAccuracy, &essay(), &ctx(2)).unwrap();
        assert!(grounded.starts_with("CONTEXT (Reference Essays with Scores):\n"));
        assert!(grounded.ends_with(&render_single_criterion(Criterion::GrammaticalRangeAccuracy, &essay()).unwrap()));
    }

    #[test]
    fn regeneration_prompt() {
        let out = render_regeneration(&essay(), band(6.5)).unwrap();
        assert!(out.contains("The official overall band score of the essay is: 6.5."));
        assert!(out.contains("arithmetic mean of the four analytic scores should be as close as possible to the given overall band: 6.5."));
        assert!(out.contains("\"Overall_Band_Score\": <overall_band>,"));
        assert!(out.contains("Essay Prompt: Some people think computers should replace teachers."));
    }

    #[test]
    fn exemplar_layout_and_hygiene() {
        let ex = Exemplar {
            id: "x".into(),
            prompt_text: "P".into(),
            essay_text: "line one\nline two".into(),
            band: band(7.0),
            criteria: None,
        };
        let block = format_exemplar(&ex);
        assert_eq!(block, "Prompt: P\nEssay: line one\nline two\nBand: 7.0");
        assert_eq!(block, format_exemplar(&ex));

        let mut self_ctx = ctx(1);
        self_ctx.exemplars[0].id = "q1".into();
        assert_eq!(render_final_band(&essay(), &self_ctx), Err(RenderError::SelfExemplar("q1".into())));
    }

    #[test]
    fn versions_cover_all_templates() {
        let versions = template_versions();
        assert_eq!(versions.len(), 10);
        assert!(versions.values().all(|v| v.len() == 12));
    }
}
