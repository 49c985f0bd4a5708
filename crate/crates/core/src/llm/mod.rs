//! Gateway to chat-completion models and the deterministic parsers that turn
//! raw generations into bands and feedback.
//!
//! Everything that talks to a model goes through the [`Backend`] trait. Two
//! implementations ship: [`OpenAiBackend`] for any OpenAI-compatible HTTP
//! endpoint and [`ScriptedBackend`], which replays fixture completions keyed
//! by request fingerprint so whole experiments can run offline. Either can be
//! wrapped in a [`CachedBackend`].

mod backend;
mod cache;
mod cost;
mod openai;
mod parse;
mod repair;
mod request;
mod scripted;

pub use backend::{Backend, BackendError, BackendHandle, CacheOnlyBackend};
pub use cache::{CacheEntry, CachedBackend, ResponseCache};
pub use cost::{estimate_cost, CostError, CostRecord, Pricing, PricingTable, UsageEntry};
pub use openai::{OpenAiBackend, OpenAiConfig};
pub use parse::{
    parse_criterion_json, parse_final_band, parse_joint_output, parse_regeneration, parse_single_criterion,
    FinalBand, JointOutput, ParseError, ParsedOutput, ParsedValue, BAND_SNAP_TOLERANCE,
};
pub use repair::repair_json;
pub use request::{Completion, DecodeParams, Fingerprint, GenerationRequest, Usage};
pub use scripted::{ScriptedBackend, ScriptedFixture};

/// Whitespace token count; the only tokenizer the crate relies on.
pub fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}
