mod common;

use std::fs;
use std::path::{Path, PathBuf};

use ielts_aes::runner::{
    build_index_file, load_dataset, rebuild_report, run_experiment, run_regeneration, score_one, ConfigError,
    ExperimentConfig, RunError, RunOptions, TraceStore,
};
use ielts_aes::synthetic::{write_demo_experiment, CASE_STUDY_ID, UNPARSEABLE_FINAL_BAND};

const N_TRAIN: usize = 30;
const N_TEST: usize = 50;
const REPORT_FILES: [&str; 4] = ["report.json", "results.md", "cost_accuracy.csv", "case_study.md"];

fn setup() -> (tempfile::TempDir, ExperimentConfig) {
    let dir = tempfile::tempdir().unwrap();
    let path = write_demo_experiment(dir.path(), N_TRAIN, N_TEST).unwrap();
    (dir, ExperimentConfig::load(&path).unwrap())
}

fn offline() -> RunOptions {
    RunOptions { offline: true, ..RunOptions::default() }
}

fn read_reports(dir: &Path) -> Vec<Vec<u8>> {
    REPORT_FILES.iter().map(|f| fs::read(dir.join(f)).unwrap()).collect()
}

fn with_output(config: &ExperimentConfig, dir: PathBuf) -> ExperimentConfig {
    let mut config = config.clone();
    config.output_dir = dir;
    config
}

#[test]
fn call_counts_cache_replay_and_byte_identical_reports() {
    let (dir, config) = setup();
    let first = run_experiment(&config, &offline()).unwrap();
    let calls = &first.meta.backend_calls;
    assert_eq!(calls["mock-final"], N_TEST);
    assert_eq!(calls["mock-joint"], N_TEST);
    assert_eq!(calls["mock-rag"], 4 * N_TEST);
    assert_eq!(calls["mock-sft"], N_TEST);
    assert_eq!(calls["mock-regen"], 0);
    assert_eq!(first.meta.cache_hits, 0);
    assert!(first.meta.peak_in_flight <= config.concurrency);
    for result in &first.results[2] {
        assert_eq!(result.calls.len(), 4);
    }

    // Same cache, fresh output directory: every call is a hit.
    let second_config = with_output(&config, dir.path().join("rerun"));
    let second = run_experiment(&second_config, &offline()).unwrap();
    assert!(second.meta.backend_calls.values().all(|&n| n == 0));
    assert_eq!(second.meta.cache_hits, 7 * N_TEST);
    assert_eq!(read_reports(&config.output_dir), read_reports(&second_config.output_dir));
    assert_eq!(first.report, second.report);
}

#[test]
fn report_contents() {
    let (_dir, config) = setup();
    let outcome = run_experiment(&config, &offline()).unwrap();
    let report = &outcome.report;
    assert_eq!(report.strategies.len(), 4);
    assert_eq!(report.n_test, N_TEST);

    let final_band = &report.strategies[0];
    assert_eq!(final_band.n_excluded, UNPARSEABLE_FINAL_BAND.len());
    assert_eq!(final_band.n_scored + final_band.n_excluded, N_TEST);
    let failures = fs::read_to_string(config.output_dir.join("failures.jsonl")).unwrap();
    assert_eq!(failures.lines().count(), UNPARSEABLE_FINAL_BAND.len());
    assert!(failures.contains("\"kind\":\"parse\""));

    // Metrics agree with naive loops over the traced predictions.
    let data = load_dataset(&config).unwrap();
    for (strategy, results) in report.strategies.iter().zip(&outcome.results) {
        let pairs: Vec<(f64, f64)> = results
            .iter()
            .filter_map(|r| Some((r.overall?.value(), data.test.get(&r.essay_id)?.overall?.value())))
            .collect();
        let metrics = strategy.metrics.as_ref().unwrap();
        assert!((metrics.accuracy - common::naive::accuracy(&pairs, 0.5)).abs() < 1e-9);
        assert!((metrics.macro_f1 - common::naive::macro_f1(&pairs)).abs() < 1e-9);
        assert!((metrics.rmse - common::naive::rmse(&pairs)).abs() < 1e-9);
        assert!((metrics.mae - common::naive::mae(&pairs)).abs() < 1e-9);
        assert!(strategy.cost.prompt_tokens > 0);
        assert!(strategy.cost.amount.is_some());
    }

    let rag = &outcome.results[2];
    assert!(rag.iter().all(|r| r.exemplar_ids.len() == 2));
    assert!(rag.iter().all(|r| r.exemplar_ids.iter().all(|id| id.starts_with("syn-train-"))));

    let table = fs::read_to_string(config.output_dir.join("results.md")).unwrap();
    assert!(table.contains("| Approach | Model / Setting | Training / Prompting Scheme | k-shot | Accuracy | F1 | RMSE | MAE |"));
    assert!(table.contains("| A3 + RAG | scripted (4 adapters) | k-Instruction Tuning + RAG | 2-shot |"));
    let csv = fs::read_to_string(config.output_dir.join("cost_accuracy.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("approach,accuracy,cost-hours,gpu-count"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn resume_after_interruption_gives_the_same_report() {
    let (dir, config) = setup();
    run_experiment(&config, &offline()).unwrap();
    let expected = read_reports(&config.output_dir);

    // A second output directory holding a run cut short: half the rag trace
    // and a torn final line, nothing else.
    let resumed_config = with_output(&config, dir.path().join("resumed"));
    let store = TraceStore::new(&config.output_dir);
    let text = fs::read_to_string(store.path("criterion-rag")).unwrap();
    let kept: Vec<&str> = text.lines().take(N_TEST / 2).collect();
    let partial = format!("{}\n{{\"essay_id\": \"syn-te", kept.join("\n"));
    let target = TraceStore::new(&resumed_config.output_dir).path("criterion-rag");
    fs::create_dir_all(target.parent().unwrap()).unwrap();
    fs::write(&target, partial).unwrap();

    let outcome = run_experiment(&resumed_config, &offline()).unwrap();
    assert_eq!(outcome.meta.resumed["criterion-rag"], N_TEST / 2);
    assert_eq!(outcome.meta.scored_now["criterion-rag"], N_TEST - N_TEST / 2);
    assert_eq!(outcome.meta.scored_now["final-band"], N_TEST);
    assert_eq!(read_reports(&resumed_config.output_dir), expected);

    // Everything complete: nothing left to score.
    let again = run_experiment(&resumed_config, &offline()).unwrap();
    assert!(again.meta.scored_now.values().all(|&n| n == 0));
    assert_eq!(read_reports(&resumed_config.output_dir), expected);
}

#[test]
fn report_command_rebuilds_from_traces() {
    let (_dir, config) = setup();
    let outcome = run_experiment(&config, &offline()).unwrap();
    let expected = read_reports(&config.output_dir);
    for file in REPORT_FILES {
        fs::remove_file(config.output_dir.join(file)).unwrap();
    }
    let rebuilt = rebuild_report(&config, &offline()).unwrap();
    assert_eq!(rebuilt, outcome.report);
    assert_eq!(read_reports(&config.output_dir), expected);
}

#[test]
fn limit_and_strategy_filter() {
    let (_dir, config) = setup();
    let options = RunOptions { offline: true, limit: Some(10), strategies: vec!["criterion-rag".into()] };
    let outcome = run_experiment(&config, &options).unwrap();
    assert_eq!(outcome.report.strategies.len(), 1);
    assert_eq!(outcome.report.n_test, 10);
    assert_eq!(outcome.meta.backend_calls["mock-rag"], 40);
    assert_eq!(outcome.meta.backend_calls["mock-final"], 0);

    let unknown = RunOptions { strategies: vec!["nope".into()], ..options };
    assert!(matches!(run_experiment(&config, &unknown), Err(RunError::Config(ConfigError::UnknownStrategy(_)))));
}

#[test]
fn saved_index_matches_in_memory_index() {
    let (dir, config) = setup();
    let in_memory = run_experiment(&config, &offline()).unwrap();
    let data = load_dataset(&config).unwrap();
    let (path, index) = build_index_file(&config, &data.train).unwrap();
    assert!(path.exists());
    assert_eq!(index.len(), N_TRAIN);
    let from_disk = run_experiment(&with_output(&config, dir.path().join("indexed")), &offline()).unwrap();
    assert_eq!(in_memory.results, from_disk.results);
}

#[test]
fn score_single_essay() {
    let (_dir, config) = setup();
    let result = score_one(&config, "criterion-rag", CASE_STUDY_ID, true).unwrap();
    assert_eq!(result.overall.unwrap().value(), 6.5);
    assert_eq!(result.criterion_mean, Some(6.375));
    assert!(matches!(score_one(&config, "criterion-rag", "missing", true), Err(RunError::UnknownEssay(_))));
}

#[test]
fn undefined_backend_fails_before_any_call() {
    let (dir, _config) = setup();
    let path = dir.path().join("experiment.json");
    let text = fs::read_to_string(&path).unwrap().replace("\"backend\": \"mock-sft\"", "\"backend\": \"gpt\"");
    fs::write(&path, text).unwrap();
    assert!(matches!(ExperimentConfig::load(&path), Err(ConfigError::UnknownBackend { .. })));
}

#[test]
fn regeneration_outputs() {
    let (_dir, config) = setup();
    let summary = run_regeneration(&config, &offline()).unwrap();
    assert_eq!(summary.attempted, N_TRAIN);
    // Train essay i answers with reply i + 100: every sixth is malformed,
    // every sixth mean-violating, the rest valid.
    let malformed = (0..N_TRAIN).filter(|i| (i + 100) % 6 == 4).count();
    let violating = (0..N_TRAIN).filter(|i| (i + 100) % 6 == 5).count();
    assert_eq!(summary.rejected["invalid_json"], malformed);
    assert_eq!(summary.rejected["mean_constraint"], violating);
    assert_eq!(summary.accepted, N_TRAIN - malformed - violating);
    assert_eq!(summary.errors, 0);

    let dir = &summary.out_dir;
    let accepted = fs::read_to_string(dir.join("accepted.jsonl")).unwrap();
    assert_eq!(accepted.lines().count(), summary.accepted);
    for line in accepted.lines() {
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        let mean = ["TR", "CC", "LR", "GRA"].iter().map(|k| row[k].as_f64().unwrap()).sum::<f64>() / 4.0;
        assert!((mean - row["band"].as_f64().unwrap()).abs() <= 0.25);
    }
    for tag in ["TR", "CC", "LR", "GRA"] {
        let rows = fs::read_to_string(dir.join(format!("instructions/{tag}.jsonl"))).unwrap();
        assert_eq!(rows.lines().count(), summary.accepted);
        let first: serde_json::Value = serde_json::from_str(rows.lines().next().unwrap()).unwrap();
        assert_eq!(first["criterion"], tag);
        let target: serde_json::Value = serde_json::from_str(first["target"].as_str().unwrap()).unwrap();
        assert!(target["score"].is_number());
        assert_eq!(target.get("comment").is_some(), tag != "TR");
    }
}
