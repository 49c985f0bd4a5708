//! The parsing function from raw model text to bands and feedback.
//!
//! All parsers are pure: the same text always yields the same value or the
//! same error variant. Failures are reported, never replaced by a default
//! band.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::repair_json;
use crate::dataset::{AnalyticEvaluation, CriterionEvaluation};
use crate::rubric::{BandScore, Criterion, CriterionComments, CriterionSet};

/// How far a model-emitted number may sit from a half band and still count
/// as that band (`6.49` reads as `6.5`).
pub const BAND_SNAP_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum ParseError {
    #[error("no band value found in output")]
    NoBandFound,
    #[error("{value} is not an admissible band{}", key.as_ref().map(|k| format!(" (key {k})")).unwrap_or_default())]
    Inadmissible { key: Option<String>, value: String },
    #[error("invalid JSON: {0}")]
    InvalidJson(String),
    #[error("missing key {0}")]
    MissingKey(String),
    #[error("mistake and correction lists differ in length for {0}")]
    ListMismatch(String),
}

/// Result of reading a single overall band from free text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalBand {
    pub band: BandScore,
    /// More than one distinct admissible band appeared in the text.
    pub multiple_candidates: bool,
}

/// A parsed generation together with the text it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub raw: String,
    pub value: ParsedValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParsedValue {
    FinalBand { band: BandScore },
    CriterionJoint { criteria: CriterionSet },
    SingleCriterion { criterion: Criterion, band: BandScore, comment: Option<String> },
    Regeneration { evaluation: AnalyticEvaluation },
}

struct NumberToken<'a> {
    start: usize,
    text: &'a str,
}

/// Standalone decimal numbers: digits with an optional fractional part, not
/// glued to letters on either side (so `Task2` and `7th` are skipped).
fn number_tokens(text: &str) -> Vec<NumberToken<'_>> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if !bytes[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
            i += 1;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
        }
        let glued_before = start > 0 && (bytes[start - 1].is_ascii_alphabetic() || bytes[start - 1] == b'.');
        let glued_after = i < bytes.len() && (bytes[i].is_ascii_alphabetic() || bytes[i] == b'_');
        if !glued_before && !glued_after {
            tokens.push(NumberToken { start, text: &text[start..i] });
        }
    }
    tokens
}

fn admissible(token: &str) -> Option<BandScore> {
    token
        .parse::<f64>()
        .ok()
        .and_then(|x| BandScore::snap_within(x, BAND_SNAP_TOLERANCE).ok())
}

/// Position just past a `Band:` label, if the text carries one.
fn band_label_end(text: &str) -> Option<usize> {
    let lower = text.to_ascii_lowercase();
    let mut from = 0;
    while let Some(pos) = lower[from..].find("band") {
        let at = from + pos;
        let after = &lower[at + 4..];
        let skipped = after.len() - after.trim_start_matches([' ', '*']).len();
        if after[skipped..].starts_with(':') {
            return Some(at + 4 + skipped + 1);
        }
        from = at + 4;
    }
    None
}

/// Reads the overall band from a final-band completion.
///
/// A number directly after a `Band:` label wins; otherwise the first number
/// that is an admissible band (within [`BAND_SNAP_TOLERANCE`]) is taken.
pub fn parse_final_band(text: &str) -> Result<FinalBand, ParseError> {
    let tokens = number_tokens(text);
    if tokens.is_empty() {
        return Err(ParseError::NoBandFound);
    }
    let candidates: Vec<(usize, BandScore)> = tokens
        .iter()
        .filter_map(|t| admissible(t.text).map(|b| (t.start, b)))
        .collect();

    let labelled = band_label_end(text).and_then(|end| {
        let next = tokens.iter().find(|t| t.start >= end)?;
        text[end..next.start]
            .chars()
            .all(|c| c.is_whitespace() || c == '*')
            .then(|| admissible(next.text))
            .flatten()
    });
    let band = match labelled.or_else(|| candidates.first().map(|(_, b)| *b)) {
        Some(band) => band,
        None => {
            return Err(ParseError::Inadmissible { key: None, value: tokens[0].text.to_owned() });
        }
    };
    let multiple_candidates = candidates.iter().any(|(_, b)| *b != band);
    Ok(FinalBand { band, multiple_candidates })
}

fn parse_object(text: &str) -> Result<Map<String, Value>, ParseError> {
    let repaired = repair_json(text);
    match serde_json::from_str::<Value>(repaired.trim()) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(other) => Err(ParseError::InvalidJson(format!("expected an object, found {}", kind(&other)))),
        Err(e) => Err(ParseError::InvalidJson(e.to_string())),
    }
}

fn kind(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

fn band_field(map: &Map<String, Value>, key: &str, path: &str) -> Result<BandScore, ParseError> {
    let value = map.get(key).ok_or_else(|| ParseError::MissingKey(path.to_owned()))?;
    let inadmissible = || ParseError::Inadmissible { key: Some(path.to_owned()), value: value.to_string() };
    let x = match value {
        Value::Number(n) => n.as_f64().ok_or_else(inadmissible)?,
        Value::String(s) => s.trim().parse::<f64>().map_err(|_| inadmissible())?,
        _ => return Err(inadmissible()),
    };
    BandScore::snap_within(x, BAND_SNAP_TOLERANCE).map_err(|_| inadmissible())
}

fn string_field(map: &Map<String, Value>, key: &str) -> Option<String> {
    map.get(key).and_then(Value::as_str).map(str::to_owned)
}

/// Criterion bands plus any holistic feedback from a joint (four-key) output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointOutput {
    pub criteria: CriterionSet,
    pub feedback: Option<String>,
}

const FEEDBACK_KEYS: [&str; 5] = ["Feedback", "feedback", "General_Feedback", "Overall_Feedback", "comment"];

/// Parses the four-key criterion output (`TR_Band`, `CC_Band`, `LR_Band`,
/// `GRA_Band`), keeping any `<TAG>_Comment` strings and holistic feedback.
pub fn parse_joint_output(text: &str) -> Result<JointOutput, ParseError> {
    let map = parse_object(text)?;
    let mut bands = [BandScore::MIN; 4];
    let mut comments = CriterionComments::default();
    for (slot, criterion) in bands.iter_mut().zip(Criterion::ALL) {
        let key = format!("{}_Band", criterion.tag());
        *slot = band_field(&map, &key, &key)?;
        comments.set(criterion, string_field(&map, &format!("{}_Comment", criterion.tag())));
    }
    let [tr, cc, lr, gra] = bands;
    let feedback = FEEDBACK_KEYS.iter().find_map(|k| string_field(&map, k));
    Ok(JointOutput { criteria: CriterionSet::new(tr, cc, lr, gra).with_comments(comments), feedback })
}

pub fn parse_criterion_json(text: &str) -> Result<CriterionSet, ParseError> {
    parse_joint_output(text).map(|joint| joint.criteria)
}

/// Parses a single-criterion output. `comment` is required for every
/// criterion except Task Response, whose output schema carries only a score.
pub fn parse_single_criterion(text: &str, expected: Criterion) -> Result<(BandScore, Option<String>), ParseError> {
    let map = parse_object(text)?;
    let band = band_field(&map, "score", "score")?;
    let comment = string_field(&map, "comment");
    if comment.is_none() && expected != Criterion::TaskResponse {
        return Err(ParseError::MissingKey("comment".into()));
    }
    Ok((band, comment))
}

const SECTIONS: [(&str, Criterion); 4] = [
    ("Task_Response", Criterion::TaskResponse),
    ("Coherence_and_Cohesion", Criterion::CoherenceCohesion),
    ("Lexical_Resource", Criterion::LexicalResource),
    ("Grammatical_Range_and_Accuracy", Criterion::GrammaticalRangeAccuracy),
];

fn string_list(map: &Map<String, Value>, key: &str, path: &str) -> Result<Option<Vec<String>>, ParseError> {
    match map.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Array(items)) => items
            .iter()
            .map(|item| {
                item.as_str()
                    .map(str::to_owned)
                    .ok_or_else(|| ParseError::InvalidJson(format!("{path}.{key} must hold strings")))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some),
        Some(_) => Err(ParseError::InvalidJson(format!("{path}.{key} must be an array"))),
    }
}

fn parse_section(root: &Map<String, Value>, name: &str) -> Result<CriterionEvaluation, ParseError> {
    let section = match root.get(name) {
        Some(Value::Object(section)) => section,
        Some(other) => return Err(ParseError::InvalidJson(format!("{name} must be an object, found {}", kind(other)))),
        None => return Err(ParseError::MissingKey(name.to_owned())),
    };
    let band = band_field(section, "Band", &format!("{name}.Band"))?;
    let mistakes = string_list(section, "Mistakes", name)?;
    let corrections = string_list(section, "Corrections", name)?;
    if let (Some(m), Some(c)) = (&mistakes, &corrections) {
        if m.len() != c.len() {
            return Err(ParseError::ListMismatch(name.to_owned()));
        }
    }
    Ok(CriterionEvaluation {
        band,
        comment: string_field(section, "Comment").unwrap_or_default(),
        mistakes: mistakes.unwrap_or_default(),
        corrections: corrections.unwrap_or_default(),
    })
}

/// Parses the full analytic re-generation schema.
pub fn parse_regeneration(text: &str) -> Result<AnalyticEvaluation, ParseError> {
    let map = parse_object(text)?;
    let mut sections = Vec::with_capacity(4);
    for (name, _) in SECTIONS {
        sections.push(parse_section(&map, name)?);
    }
    let overall_band = band_field(&map, "Overall_Band_Score", "Overall_Band_Score")?;
    let mut sections = sections.into_iter();
    let mut next = || sections.next().expect("four sections parsed");
    Ok(AnalyticEvaluation {
        task_response: next(),
        coherence_and_cohesion: next(),
        lexical_resource: next(),
        grammatical_range_and_accuracy: next(),
        overall_band,
        general_feedback: string_field(&map, "General_Feedback").unwrap_or_default(),
    })
}
