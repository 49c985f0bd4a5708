use serde::{Deserialize, Serialize};

use super::{DatasetError, DatasetSplit};
use crate::rubric::BandScore;

/// Summary statistics of a split. Score statistics cover essays with a gold
/// overall band; token lengths cover every essay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: usize,
    pub avg_tokens: f64,
    pub score_range: (BandScore, BandScore),
    pub mean_overall: f64,
    /// Population standard deviation.
    pub std_overall: f64,
}

pub fn split_stats(split: &DatasetSplit) -> Result<DatasetStats, DatasetError> {
    let essays = split.essays();
    let bands: Vec<BandScore> = essays.iter().filter_map(|e| e.overall).collect();
    if bands.is_empty() {
        return Err(DatasetError::EmptySplit);
    }
    let n = bands.len() as f64;
    let mean = bands.iter().map(|b| b.value()).sum::<f64>() / n;
    let variance = bands.iter().map(|b| (b.value() - mean).powi(2)).sum::<f64>() / n;
    let tokens: usize = essays.iter().map(|e| e.token_count()).sum();
    Ok(DatasetStats {
        count: bands.len(),
        avg_tokens: tokens as f64 / essays.len() as f64,
        score_range: (
            *bands.iter().min().expect("non-empty"),
            *bands.iter().max().expect("non-empty"),
        ),
        mean_overall: mean,
        std_overall: variance.sqrt(),
    })
}
