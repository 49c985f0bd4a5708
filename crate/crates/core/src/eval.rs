//! Band-prediction metrics: tolerance accuracy, macro-F1, RMSE, MAE and the
//! 19×19 confusion matrix.
//!
//! Essays whose output could not be parsed are carried as exclusions with a
//! reason and never enter a metric.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rubric::{BandScore, NUM_BANDS};

/// Tolerances always reported side by side.
pub const ACCURACY_TOLERANCES: [f64; 3] = [0.0, 0.5, 1.0];

/// Tolerance of the headline accuracy figure.
pub const DEFAULT_TOLERANCE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("no scored pairs")]
    EmptyPairs,
    #[error("essay `{0}` is paired twice")]
    DuplicateId(String),
    #[error("tolerance must be finite and non-negative, got {0}")]
    InvalidTolerance(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub id: String,
    pub predicted: BandScore,
    pub gold: BandScore,
}

impl Pair {
    fn error(&self) -> f64 {
        self.predicted.value() - self.gold.value()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub id: String,
    pub reason: String,
}

/// Predictions paired with gold bands, plus the essays left out.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PairedScores {
    pairs: Vec<Pair>,
    excluded: Vec<Exclusion>,
    #[serde(skip)]
    ids: HashSet<String>,
}

impl PairedScores {
    pub fn new() -> Self {
        PairedScores::default()
    }

    fn claim(&mut self, id: &str) -> Result<(), EvalError> {
        if !self.ids.insert(id.to_owned()) {
            return Err(EvalError::DuplicateId(id.to_owned()));
        }
        Ok(())
    }

    pub fn push(&mut self, id: impl Into<String>, predicted: BandScore, gold: BandScore) -> Result<(), EvalError> {
        let id = id.into();
        self.claim(&id)?;
        self.pairs.push(Pair { id, predicted, gold });
        Ok(())
    }

    pub fn exclude(&mut self, id: impl Into<String>, reason: impl Into<String>) -> Result<(), EvalError> {
        let id = id.into();
        self.claim(&id)?;
        self.excluded.push(Exclusion { id, reason: reason.into() });
        Ok(())
    }

    /// Builds from `(predicted, gold)` values, numbering ids from 0.
    pub fn from_bands(bands: impl IntoIterator<Item = (BandScore, BandScore)>) -> Self {
        let mut scores = PairedScores::new();
        for (i, (predicted, gold)) in bands.into_iter().enumerate() {
            scores.push(i.to_string(), predicted, gold).expect("generated ids are unique");
        }
        scores
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn excluded(&self) -> &[Exclusion] {
        &self.excluded
    }

    pub fn total(&self) -> usize {
        self.pairs.len() + self.excluded.len()
    }

    fn scored(&self) -> Result<&[Pair], EvalError> {
        if self.pairs.is_empty() {
            return Err(EvalError::EmptyPairs);
        }
        Ok(&self.pairs)
    }
}

/// Fraction of pairs with `|predicted - gold| <= tolerance`.
pub fn accuracy(scores: &PairedScores, tolerance: f64) -> Result<f64, EvalError> {
    if !tolerance.is_finite() || tolerance < 0.0 {
        return Err(EvalError::InvalidTolerance(tolerance.to_string()));
    }
    let pairs = scores.scored()?;
    let hits = pairs.iter().filter(|p| p.error().abs() <= tolerance + 1e-9).count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Unweighted mean of per-class F1 over every band that occurs as a gold or
/// a predicted label.
pub fn macro_f1(scores: &PairedScores) -> Result<f64, EvalError> {
    let pairs = scores.scored()?;
    let mut tp = [0usize; NUM_BANDS];
    let mut gold = [0usize; NUM_BANDS];
    let mut pred = [0usize; NUM_BANDS];
    for p in pairs {
        let (g, q) = (p.gold.half_steps() as usize, p.predicted.half_steps() as usize);
        gold[g] += 1;
        pred[q] += 1;
        if g == q {
            tp[g] += 1;
        }
    }
    let mut total = 0.0;
    let mut classes = 0;
    for c in 0..NUM_BANDS {
        if gold[c] == 0 && pred[c] == 0 {
            continue;
        }
        classes += 1;
        // F1 = 2TP / (2TP + FP + FN) = 2TP / (gold + pred).
        total += 2.0 * tp[c] as f64 / (gold[c] + pred[c]) as f64;
    }
    Ok(total / classes as f64)
}

pub fn rmse(scores: &PairedScores) -> Result<f64, EvalError> {
    let pairs = scores.scored()?;
    let sq: f64 = pairs.iter().map(|p| p.error().powi(2)).sum();
    Ok((sq / pairs.len() as f64).sqrt())
}

pub fn mae(scores: &PairedScores) -> Result<f64, EvalError> {
    let pairs = scores.scored()?;
    let abs: f64 = pairs.iter().map(|p| p.error().abs()).sum();
    Ok(abs / pairs.len() as f64)
}

/// Counts indexed `[gold][predicted]` by half-step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionMatrix(Vec<Vec<u32>>);

impl ConfusionMatrix {
    pub fn get(&self, gold: BandScore, predicted: BandScore) -> u32 {
        self.0[gold.half_steps() as usize][predicted.half_steps() as usize]
    }

    pub fn rows(&self) -> &[Vec<u32>] {
        &self.0
    }

    pub fn total(&self) -> u32 {
        self.0.iter().flatten().sum()
    }
}

pub fn confusion(scores: &PairedScores) -> Result<ConfusionMatrix, EvalError> {
    let pairs = scores.scored()?;
    let mut matrix = vec![vec![0u32; NUM_BANDS]; NUM_BANDS];
    for p in pairs {
        matrix[p.gold.half_steps() as usize][p.predicted.half_steps() as usize] += 1;
    }
    Ok(ConfusionMatrix(matrix))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToleranceAccuracy {
    pub tolerance: f64,
    pub accuracy: f64,
}

/// All metrics for one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Accuracy at [`DEFAULT_TOLERANCE`].
    pub accuracy: f64,
    pub accuracy_by_tolerance: Vec<ToleranceAccuracy>,
    pub macro_f1: f64,
    pub rmse: f64,
    pub mae: f64,
    pub n_scored: usize,
    pub n_excluded: usize,
    pub parse_failure_rate: f64,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn compute(scores: &PairedScores) -> Result<Self, EvalError> {
        Ok(MetricsReport {
            accuracy: accuracy(scores, DEFAULT_TOLERANCE)?,
            accuracy_by_tolerance: ACCURACY_TOLERANCES
                .iter()
                .map(|&tolerance| Ok(ToleranceAccuracy { tolerance, accuracy: accuracy(scores, tolerance)? }))
                .collect::<Result<_, EvalError>>()?,
            macro_f1: macro_f1(scores)?,
            rmse: rmse(scores)?,
            mae: mae(scores)?,
            n_scored: scores.pairs.len(),
            n_excluded: scores.excluded.len(),
            parse_failure_rate: scores.excluded.len() as f64 / scores.total() as f64,
            confusion: confusion(scores)?,
        })
    }

    pub fn accuracy_at(&self, tolerance: f64) -> Option<f64> {
        self.accuracy_by_tolerance
            .iter()
            .find(|t| (t.tolerance - tolerance).abs() < 1e-12)
            .map(|t| t.accuracy)
    }

    /// `| Accuracy | F1 | RMSE | MAE |` cells, four decimals each.
    pub fn table_cells(&self) -> [String; 4] {
        [self.accuracy, self.macro_f1, self.rmse, self.mae].map(|v| format!("{v:.4}"))
    }
}
