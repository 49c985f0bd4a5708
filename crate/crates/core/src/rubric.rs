//! Band-score value system, the four analytic criteria and the rule that folds
//! criterion scores back into an overall band.
//!
//! A [`BandScore`] is stored as an integer count of half bands (`0..=18`), so
//! equality, ordering and class indexing never touch floating point.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Number of admissible band values (`0.0, 0.5, ..., 9.0`).
pub const NUM_BANDS: usize = 19;

const MAX_HALF_STEPS: u8 = 18;
const HALF_STEP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum BandError {
    #[error("band {0} is outside [0, 9]")]
    OutOfRange(f64),
    #[error("band {0} is not a multiple of 0.5")]
    NotHalfStep(f64),
}

/// An IELTS band on the half-band scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BandScore(u8);

impl BandScore {
    pub const MIN: BandScore = BandScore(0);
    pub const MAX: BandScore = BandScore(MAX_HALF_STEPS);

    /// Builds a band from its half-step index; `None` above 18.
    pub const fn from_half_steps(steps: u8) -> Option<Self> {
        if steps <= MAX_HALF_STEPS {
            Some(BandScore(steps))
        } else {
            None
        }
    }

    /// Index of this band in `0..19`; also the confusion-matrix class index.
    pub const fn half_steps(self) -> u8 {
        self.0
    }

    pub fn value(self) -> f64 {
        f64::from(self.0) / 2.0
    }

    /// Accepts `x` only if it is an admissible half band (within 1e-9).
    pub fn validate(x: f64) -> Result<Self, BandError> {
        if !x.is_finite() {
            return Err(BandError::NotHalfStep(x));
        }
        if x < -HALF_STEP_TOLERANCE || x > 9.0 + HALF_STEP_TOLERANCE {
            return Err(BandError::OutOfRange(x));
        }
        let doubled = x * 2.0;
        let nearest = doubled.round();
        if (doubled - nearest).abs() > 2.0 * HALF_STEP_TOLERANCE {
            return Err(BandError::NotHalfStep(x));
        }
        Ok(BandScore(nearest as u8))
    }

    /// Maps `x` onto the scale under `rule`. Admissible values are returned
    /// unchanged by every rule.
    pub fn snap(x: f64, rule: RoundingRule) -> Result<Self, BandError> {
        if !x.is_finite() || x < -HALF_STEP_TOLERANCE || x > 9.0 + HALF_STEP_TOLERANCE {
            return Err(BandError::OutOfRange(x));
        }
        if let Ok(exact) = Self::validate(x) {
            return Ok(exact);
        }
        let doubled = x * 2.0;
        let steps = match rule {
            RoundingRule::NearestHalfTiesUp => (doubled + 0.5).floor(),
            RoundingRule::NearestHalfTiesDown => (doubled - 0.5).ceil(),
            RoundingRule::TruncateToHalf => doubled.floor(),
        };
        Ok(BandScore(steps.clamp(0.0, f64::from(MAX_HALF_STEPS)) as u8))
    }

    /// Like [`validate`](Self::validate) but accepts float noise up to
    /// `tolerance` (model outputs such as `6.49`).
    pub fn snap_within(x: f64, tolerance: f64) -> Result<Self, BandError> {
        if !x.is_finite() {
            return Err(BandError::NotHalfStep(x));
        }
        if x < -tolerance || x > 9.0 + tolerance {
            return Err(BandError::OutOfRange(x));
        }
        let nearest = (x * 2.0).round() / 2.0;
        if (x - nearest).abs() > tolerance + HALF_STEP_TOLERANCE {
            return Err(BandError::NotHalfStep(x));
        }
        Self::validate(nearest.clamp(0.0, 9.0))
    }

    /// Every admissible band in ascending order.
    pub fn all() -> impl Iterator<Item = BandScore> {
        (0..=MAX_HALF_STEPS).map(BandScore)
    }
}

impl fmt::Display for BandScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.0 / 2, if self.0 % 2 == 1 { 5 } else { 0 })
    }
}

impl FromStr for BandScore {
    type Err = BandError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let x: f64 = s.trim().parse().map_err(|_| BandError::NotHalfStep(f64::NAN))?;
        Self::validate(x)
    }
}

impl Serialize for BandScore {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for BandScore {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Number(x) => BandScore::validate(x).map_err(serde::de::Error::custom),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// The four official analytic criteria.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Criterion {
    #[serde(rename = "TR")]
    TaskResponse,
    #[serde(rename = "CC")]
    CoherenceCohesion,
    #[serde(rename = "LR")]
    LexicalResource,
    #[serde(rename = "GRA")]
    GrammaticalRangeAccuracy,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [
        Criterion::TaskResponse,
        Criterion::CoherenceCohesion,
        Criterion::LexicalResource,
        Criterion::GrammaticalRangeAccuracy,
    ];

    pub const fn tag(self) -> &'static str {
        match self {
            Criterion::TaskResponse => "TR",
            Criterion::CoherenceCohesion => "CC",
            Criterion::LexicalResource => "LR",
            Criterion::GrammaticalRangeAccuracy => "GRA",
        }
    }

    pub const fn full_name(self) -> &'static str {
        match self {
            Criterion::TaskResponse => "Task Response",
            Criterion::CoherenceCohesion => "Coherence and Cohesion",
            Criterion::LexicalResource => "Lexical Resource",
            Criterion::GrammaticalRangeAccuracy => "Grammatical Range and Accuracy",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.tag().eq_ignore_ascii_case(tag.trim()))
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Per-criterion free-text comments; any may be absent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionComments {
    #[serde(rename = "TR", default, skip_serializing_if = "Option::is_none")]
    pub tr: Option<String>,
    #[serde(rename = "CC", default, skip_serializing_if = "Option::is_none")]
    pub cc: Option<String>,
    #[serde(rename = "LR", default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<String>,
    #[serde(rename = "GRA", default, skip_serializing_if = "Option::is_none")]
    pub gra: Option<String>,
}

impl CriterionComments {
    pub fn get(&self, criterion: Criterion) -> Option<&str> {
        match criterion {
            Criterion::TaskResponse => self.tr.as_deref(),
            Criterion::CoherenceCohesion => self.cc.as_deref(),
            Criterion::LexicalResource => self.lr.as_deref(),
            Criterion::GrammaticalRangeAccuracy => self.gra.as_deref(),
        }
    }

    pub fn set(&mut self, criterion: Criterion, comment: Option<String>) {
        let slot = match criterion {
            Criterion::TaskResponse => &mut self.tr,
            Criterion::CoherenceCohesion => &mut self.cc,
            Criterion::LexicalResource => &mut self.lr,
            Criterion::GrammaticalRangeAccuracy => &mut self.gra,
        };
        *slot = comment;
    }

    pub fn is_empty(&self) -> bool {
        Criterion::ALL.iter().all(|c| self.get(*c).is_none())
    }
}

/// The four analytic scores of one essay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionSet {
    #[serde(rename = "TR")]
    pub tr: BandScore,
    #[serde(rename = "CC")]
    pub cc: BandScore,
    #[serde(rename = "LR")]
    pub lr: BandScore,
    #[serde(rename = "GRA")]
    pub gra: BandScore,
    #[serde(default, skip_serializing_if = "CriterionComments::is_empty")]
    pub comments: CriterionComments,
}

impl CriterionSet {
    pub fn new(tr: BandScore, cc: BandScore, lr: BandScore, gra: BandScore) -> Self {
        CriterionSet { tr, cc, lr, gra, comments: CriterionComments::default() }
    }

    /// Convenience constructor from raw values; each must be admissible.
    pub fn from_values(tr: f64, cc: f64, lr: f64, gra: f64) -> Result<Self, BandError> {
        Ok(Self::new(
            BandScore::validate(tr)?,
            BandScore::validate(cc)?,
            BandScore::validate(lr)?,
            BandScore::validate(gra)?,
        ))
    }

    pub fn with_comments(mut self, comments: CriterionComments) -> Self {
        self.comments = comments;
        self
    }

    pub fn get(&self, criterion: Criterion) -> BandScore {
        match criterion {
            Criterion::TaskResponse => self.tr,
            Criterion::CoherenceCohesion => self.cc,
            Criterion::LexicalResource => self.lr,
            Criterion::GrammaticalRangeAccuracy => self.gra,
        }
    }

    pub fn scores(&self) -> [BandScore; 4] {
        [self.tr, self.cc, self.lr, self.gra]
    }

    pub fn min(&self) -> BandScore {
        self.scores().into_iter().min().unwrap_or(BandScore::MIN)
    }

    pub fn max(&self) -> BandScore {
        self.scores().into_iter().max().unwrap_or(BandScore::MAX)
    }

    /// Unrounded arithmetic mean of the four bands.
    pub fn mean(&self) -> f64 {
        f64::from(self.half_step_sum()) / 8.0
    }

    fn half_step_sum(&self) -> u16 {
        self.scores().iter().map(|b| u16::from(b.half_steps())).sum()
    }
}

/// How a criterion mean that falls between half bands is mapped back onto the
/// scale.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoundingRule {
    /// `.25` and `.75` round upward. Matches the public IELTS convention.
    #[default]
    NearestHalfTiesUp,
    NearestHalfTiesDown,
    TruncateToHalf,
}

/// An overall band together with the mean it was rounded from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub overall: BandScore,
    pub mean: f64,
}

/// Mean of the four criteria, snapped to the scale under `rule`.
///
/// Works on integer half steps: the mean in half steps is `sum / 4`, so the
/// rounding is exact for every one of the 19^4 inputs.
pub fn overall_from_criteria(criteria: &CriterionSet, rule: RoundingRule) -> Aggregate {
    let sum = criteria.half_step_sum();
    let steps = match rule {
        RoundingRule::NearestHalfTiesUp => (sum + 2) / 4,
        RoundingRule::NearestHalfTiesDown => (sum + 1) / 4,
        RoundingRule::TruncateToHalf => sum / 4,
    };
    Aggregate {
        overall: BandScore(steps as u8),
        mean: criteria.mean(),
    }
}
