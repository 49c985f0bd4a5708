//! Independent oracles and fixture checkers shared by the integration
//! targets. Nothing here calls the code under test to compute an expected
//! value.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ielts_aes::llm::{parse_final_band, parse_joint_output, parse_regeneration, parse_single_criterion, ParseError};
use ielts_aes::rubric::{BandScore, Criterion, CriterionSet, RoundingRule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Value};

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn band(x: f64) -> BandScore {
    BandScore::validate(x).unwrap()
}

/// Every half band from 0.0 to 9.0 as floats.
pub fn scale() -> Vec<f64> {
    (0..=18).map(|s| s as f64 / 2.0).collect()
}

/// Brute-force aggregation: float mean, then the nearest scale point,
/// breaking exact ties by the rule.
pub fn oracle_overall(values: [f64; 4], rule: RoundingRule) -> f64 {
    let mean = values.iter().sum::<f64>() / 4.0;
    if rule == RoundingRule::TruncateToHalf {
        return scale().into_iter().filter(|&b| b <= mean).fold(0.0, f64::max);
    }
    let mut best = 0.0;
    let mut best_distance = f64::INFINITY;
    for b in scale() {
        let d = (b - mean).abs();
        let tie = d == best_distance;
        let take_tie = tie && rule == RoundingRule::NearestHalfTiesUp;
        if d < best_distance || take_tie {
            best = b;
            best_distance = d;
        }
    }
    best
}

/// Naive metric definitions over (predicted, gold) floats.
pub mod naive {
    pub fn accuracy(pairs: &[(f64, f64)], tolerance: f64) -> f64 {
        let mut hits = 0;
        for (p, g) in pairs {
            if (p - g).abs() <= tolerance + 1e-9 {
                hits += 1;
            }
        }
        hits as f64 / pairs.len() as f64
    }

    pub fn macro_f1(pairs: &[(f64, f64)]) -> f64 {
        let mut labels: Vec<f64> = Vec::new();
        for (p, g) in pairs {
            for x in [*p, *g] {
                if !labels.contains(&x) {
                    labels.push(x);
                }
            }
        }
        let mut sum = 0.0;
        for &c in &labels {
            let tp = pairs.iter().filter(|(p, g)| *p == c && *g == c).count() as f64;
            let fp = pairs.iter().filter(|(p, g)| *p == c && *g != c).count() as f64;
            let fneg = pairs.iter().filter(|(p, g)| *p != c && *g == c).count() as f64;
            let precision = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
            let recall = if tp + fneg == 0.0 { 0.0 } else { tp / (tp + fneg) };
            sum += if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        }
        sum / labels.len() as f64
    }

    pub fn rmse(pairs: &[(f64, f64)]) -> f64 {
        let mut s = 0.0;
        for (p, g) in pairs {
            s += (p - g) * (p - g);
        }
        (s / pairs.len() as f64).sqrt()
    }

    pub fn mae(pairs: &[(f64, f64)]) -> f64 {
        let mut s = 0.0;
        for (p, g) in pairs {
            s += (p - g).abs();
        }
        s / pairs.len() as f64
    }
}

/// `n` seeded (predicted, gold) pairs, predictions near gold.
pub fn random_pairs(seed: u64, n: usize) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let g: i32 = rng.random_range(6..=16);
            let p = (g + rng.random_range(-3..=3)).clamp(0, 18);
            (p as f64 / 2.0, g as f64 / 2.0)
        })
        .collect()
}

/// Seeded vectors in a few dimensions with deliberate duplicates, so equal
/// similarities occur and the tie-break is exercised.
pub fn synthetic_vectors(seed: u64, n: usize, dim: usize) -> Vec<(String, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<(String, Vec<f64>)> = Vec::with_capacity(n);
    for i in 0..n {
        let v = if i % 10 == 9 {
            out[rng.random_range(0..i)].1.clone()
        } else {
            (0..dim).map(|_| rng.random_range(-4..=4) as f64 + 0.5).collect()
        };
        out.push((format!("v{:04}", (i * 7919) % n), v));
    }
    out
}

/// Exhaustive top-k: plain loops, descending cosine, ascending id on ties.
pub fn oracle_top_k(corpus: &[(String, Vec<f64>)], query: &[f64], exclude: Option<&str>, k: usize) -> Vec<String> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scored: Vec<(f64, &str)> = Vec::new();
    for (id, v) in corpus {
        if Some(id.as_str()) == exclude {
            continue;
        }
        let dot: f64 = v.iter().zip(query).map(|(a, b)| a * b).sum();
        scored.push((dot / (norm(v) * norm(query)), id));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
    scored.into_iter().take(k).map(|(_, id)| id.to_owned()).collect()
}

#[derive(Debug, Deserialize)]
pub struct ParserCase {
    pub name: String,
    pub parser: String,
    pub input: String,
    pub expect: Value,
}

pub fn parser_cases() -> Vec<ParserCase> {
    let text = std::fs::read_to_string(fixtures_dir().join("parser_corpus.jsonl")).unwrap();
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn bands(set: &CriterionSet) -> Value {
    json!(set.scores().map(|b| b.value()))
}

fn run_parser(case: &ParserCase) -> Result<Value, ParseError> {
    match case.parser.as_str() {
        "final-band" => parse_final_band(&case.input)
            .map(|f| json!({"band": f.band.value(), "multiple_candidates": f.multiple_candidates})),
        "joint" => parse_joint_output(&case.input).map(|j| bands(&j.criteria)),
        "regeneration" => parse_regeneration(&case.input)
            .map(|e| json!({"bands": bands(&e.criteria()), "overall": e.overall_band.value()})),
        other => {
            let tag = other.strip_prefix("single-").expect("known parser");
            let criterion = Criterion::from_tag(tag).expect("known criterion");
            parse_single_criterion(&case.input, criterion)
                .map(|(band, comment)| json!({"band": band.value(), "comment": comment}))
        }
    }
}

/// Compares one case with its recorded expectation. Error details are
/// compared when recorded; free-form JSON error messages are not.
pub fn check_parser_case(case: &ParserCase) -> Result<(), String> {
    let actual = run_parser(case);
    match (&actual, case.expect.get("ok"), case.expect.get("error")) {
        (Ok(value), Some(expected), None) if value == expected => Ok(()),
        (Err(err), None, Some(expected)) => {
            let actual = serde_json::to_value(err).unwrap();
            let kind_matches = actual["kind"] == expected["kind"];
            let detail_matches = expected.get("detail").is_none_or(|d| actual.get("detail") == Some(d));
            if kind_matches && detail_matches {
                Ok(())
            } else {
                Err(format!("{}: expected error {expected}, got {actual}", case.name))
            }
        }
        _ => Err(format!("{}: expected {}, got {actual:?}", case.name, case.expect)),
    }
}
