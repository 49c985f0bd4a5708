use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Usage;

/// Per-1k-token prices for one model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Pricing {
    pub prompt_per_1k: f64,
    pub output_per_1k: f64,
}

pub type PricingTable = BTreeMap<String, Pricing>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CostError {
    #[error("no pricing for model {0}")]
    UnknownModel(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageEntry {
    pub model: String,
    pub usage: Usage,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub prompt_tokens: u64,
    pub output_tokens: u64,
    pub amount: f64,
    pub wall_clock_ms: u64,
}

impl CostRecord {
    pub fn add(&mut self, other: &CostRecord) {
        self.prompt_tokens += other.prompt_tokens;
        self.output_tokens += other.output_tokens;
        self.amount += other.amount;
        self.wall_clock_ms += other.wall_clock_ms;
    }
}

pub fn estimate_cost(entries: &[UsageEntry], pricing: &PricingTable) -> Result<CostRecord, CostError> {
    let mut record = CostRecord::default();
    for entry in entries {
        let price = pricing.get(&entry.model).ok_or_else(|| CostError::UnknownModel(entry.model.clone()))?;
        record.prompt_tokens += entry.usage.prompt_tokens;
        record.output_tokens += entry.usage.output_tokens;
        record.amount += entry.usage.prompt_tokens as f64 / 1000.0 * price.prompt_per_1k
            + entry.usage.output_tokens as f64 / 1000.0 * price.output_per_1k;
        record.wall_clock_ms += entry.latency_ms;
    }
    Ok(record)
}
