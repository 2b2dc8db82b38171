use std::path::{Path, PathBuf};
use std::process::Command;

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn sim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chorus-sim"))
}

fn stats() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chorus-stats"))
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    let summary = dir.path().join("summary.json");
    let status = sim()
        .args(["run", "--scenario"])
        .arg(scenarios().join("two-submissions.yaml"))
        .args(["--seed", "3", "--out"])
        .arg(&log)
        .arg("--summary")
        .arg(&summary)
        .status()
        .unwrap();
    assert!(status.success());

    let text = std::fs::read_to_string(&log).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["seq"], 1);
    let s: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(s["scenario"], "two-submissions");
    assert!(s["invariant_violations"].as_array().unwrap().is_empty());

    let out = stats()
        .arg("--log")
        .arg(&log)
        .args(["--report", "cost", "--json"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let cost: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cost["totals"], s["cost"]["totals"]);

    let out = stats()
        .arg("--log")
        .arg(&log)
        .args(["--report", "workers", "--csv"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("worker_id,"));
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let path = dir.path().join(name);
        let ok = sim()
            .args(["run", "--scenario"])
            .arg(scenarios().join("post-closure.yaml"))
            .args(["--seed", seed, "--out"])
            .arg(&path)
            .status()
            .unwrap()
            .success();
        assert!(ok);
        std::fs::read(path).unwrap()
    };
    assert_eq!(run("a.jsonl", "9"), run("b.jsonl", "9"));
}

#[test]
fn fuzz_reports_clean_runs() {
    let out = sim()
        .args(["fuzz", "--runs", "10", "--seed", "2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("10 runs,"), "{text}");
    assert!(text.contains(", 0 failures"));
}

#[test]
fn corpus_round_trips_through_run() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("corpus.json");
    let log = dir.path().join("corpus.jsonl");
    assert!(sim()
        .args(["corpus", "--seed", "2", "--sessions", "30", "--out"])
        .arg(&scenario)
        .status()
        .unwrap()
        .success());
    assert!(sim()
        .args(["run", "--scenario"])
        .arg(&scenario)
        .arg("--out")
        .arg(&log)
        .status()
        .unwrap()
        .success());
    let out = stats()
        .arg("--log")
        .arg(&log)
        .args(["--report", "sessions", "--json"])
        .output()
        .unwrap();
    let st: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(st["n_sessions"], 30);
}

#[test]
fn schema_describes_scenarios() {
    let out = sim().arg("schema").output().unwrap();
    assert!(out.status.success());
    let schema: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(schema["title"], "Scenario");
    let published: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(
            Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/scenario.schema.json"),
        )
        .unwrap(),
    )
    .unwrap();
    assert_eq!(schema, published, "docs/scenario.schema.json is stale");
}

#[test]
fn bad_input_exits_with_an_error() {
    let out = stats()
        .args(["--log", "/nonexistent.jsonl"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}
