use std::path::Path;
use std::process::{Command, Output};

use ielts_aes::synthetic::{write_demo_experiment, CASE_STUDY_ID};

fn run(config: &Path, args: &[&str]) -> Output {
    let output = Command::new(env!("CARGO_BIN_EXE_ielts-aes"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(output.status.success(), "{args:?}: {}", String::from_utf8_lossy(&output.stderr));
    output
}

fn stdout(output: &Output) -> String {
    String::from_utf8(output.stdout.clone()).unwrap()
}

#[test]
fn offline_eval_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_demo_experiment(dir.path(), 20, 12).unwrap();

    let ingest: serde_json::Value = serde_json::from_str(&stdout(&run(&config, &["ingest"]))).unwrap();
    assert_eq!(ingest["train"], 20);
    assert_eq!(ingest["test"], 12);
    assert_eq!(ingest["primary_dropped"], 0);

    let index = stdout(&run(&config, &["index", "build"]));
    assert!(index.starts_with("20 entries, dim 512"));

    let eval = stdout(&run(&config, &["--offline", "eval"]));
    assert!(eval.contains("| A3 + RAG |"));
    let report_json = std::fs::read(dir.path().join("out/report.json")).unwrap();

    let rebuilt = stdout(&run(&config, &["report"]));
    assert_eq!(rebuilt, eval);
    assert_eq!(std::fs::read(dir.path().join("out/report.json")).unwrap(), report_json);

    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["backend_calls"]["mock-rag"], 48);
}

#[test]
fn score_and_regen() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_demo_experiment(dir.path(), 12, 4).unwrap();
    let scored: serde_json::Value = serde_json::from_str(&stdout(&run(
        &config,
        &["--offline", "--strategy", "criterion-rag", "score", "--essay", CASE_STUDY_ID],
    )))
    .unwrap();
    assert_eq!(scored["overall"], 6.5);
    assert_eq!(scored["calls"].as_array().unwrap().len(), 4);

    let regen: serde_json::Value = serde_json::from_str(&stdout(&run(&config, &["--offline", "regen"]))).unwrap();
    assert_eq!(regen["attempted"], 12);
    assert!(dir.path().join("out/regen/instructions/GRA.jsonl").exists());
}

#[test]
fn score_needs_one_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_demo_experiment(dir.path(), 4, 2).unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_ielts-aes"))
        .arg("--config")
        .arg(&config)
        .args(["score", "--essay", CASE_STUDY_ID])
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("exactly one --strategy"));
}
