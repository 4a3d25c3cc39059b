mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

use common::scenario_path;

fn mapek(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mapek")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn run_s1(journal: &Path, ticks: &str) -> Output {
    let s = scenario_path("s1_memory_leak");
    let c = scenario_path("s1_config");
    mapek(&[
        "run",
        "--scenario",
        s.to_str().unwrap(),
        "--config",
        c.to_str().unwrap(),
        "--ticks",
        ticks,
        "--journal",
        journal.to_str().unwrap(),
    ])
}

#[test]
fn zero_ticks_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_s1(&dir.path().join("j.jsonl"), "0");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--ticks"));
    assert!(!dir.path().join("j.jsonl").exists());
}

#[test]
fn run_then_replay_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("s1.jsonl");
    let summary: Value = serde_json::from_str(&stdout(&run_s1(&journal, "80"))).unwrap();
    assert_eq!(summary["cycles"], 80);
    assert_eq!(summary["executions"]["completed"], 1);

    let j = journal.to_str().unwrap();
    let first = stdout(&mapek(&["replay", "--journal", j]));
    let second = stdout(&mapek(&["replay", "--journal", j]));
    assert_eq!(first, second);
    assert_eq!(first.trim(), summary["digest"].as_str().unwrap());

    let report: Value = serde_json::from_str(&stdout(&mapek(&["report", "--journal", j]))).unwrap();
    let mut scanned: BTreeMap<String, u64> = BTreeMap::new();
    let text = std::fs::read_to_string(&journal).unwrap();
    for line in text.lines() {
        let e: Value = serde_json::from_str(line).unwrap();
        *scanned.entry(e["kind"].as_str().unwrap().to_string()).or_default() += 1;
    }
    for (kind, n) in report["counts"].as_object().unwrap() {
        assert_eq!(n.as_u64().unwrap(), scanned.get(kind).copied().unwrap_or(0), "{kind}");
    }
    assert_eq!(report["entries"].as_u64().unwrap() as usize, text.lines().count());
    assert_eq!(report["audit_violations"], json!([]));
    assert_eq!(report["digest"], summary["digest"]);
}

#[test]
fn refuses_to_append_to_an_existing_run() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("s1.jsonl");
    stdout(&run_s1(&journal, "3"));
    let before = std::fs::read(&journal).unwrap();
    let out = run_s1(&journal, "3");
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert_eq!(std::fs::read(&journal).unwrap(), before);
}

#[test]
fn report_shows_approval_latency() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("s2.jsonl");
    let s = scenario_path("s2_cert_expiry");
    let c = scenario_path("s2_config");
    stdout(&mapek(&[
        "run",
        "--scenario",
        s.to_str().unwrap(),
        "--config",
        c.to_str().unwrap(),
        "--ticks",
        "100",
        "--journal",
        journal.to_str().unwrap(),
    ]));
    let report: Value = serde_json::from_str(&stdout(&mapek(&["report", "--journal", journal.to_str().unwrap()]))).unwrap();
    assert_eq!(report["approvals"]["expired"], 1);
    assert_eq!(report["approval_latencies"][0]["latency_ticks"], 50);
}

#[test]
fn missing_files_fail_cleanly() {
    for args in [
        vec!["replay", "--journal", "/nonexistent/j.jsonl"],
        vec!["report", "--journal", "/nonexistent/j.jsonl"],
        vec!["analyze", "--trace", "/nonexistent/t.jsonl"],
        vec!["run", "--scenario", "/nonexistent/s.toml", "--config", "/nonexistent/c.toml", "--ticks", "1"],
    ] {
        let out = mapek(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"), "{args:?}");
    }
}

#[test]
fn analyze_flags_a_step_in_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.jsonl");
    let config = dir.path().join("config.toml");
    std::fs::write(&config, "[monitor]\nwindow_len = 10\n[goals.svc-a]\nlatency_ms = { max = 100.0 }\n").unwrap();
    let mut lines = String::new();
    for t in 0..40u64 {
        let v = if t >= 30 { 400.0 } else { 20.0 };
        lines += &json!({"service_id": "svc-a", "metric": "latency_ms", "layer": "dynamic", "value": v, "tick": t}).to_string();
        lines.push('\n');
    }
    std::fs::write(&trace, lines).unwrap();
    let out = stdout(&mapek(&["analyze", "--trace", trace.to_str().unwrap(), "--config", config.to_str().unwrap()]));
    let reports: Vec<Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(reports.len(), 1, "{out}");
    // A flat baseline pins CUSUM at its sigma floor, so it outscores the threshold vote.
    assert_eq!(reports[0]["signature"], json!({"kind": "level_shift", "target": "svc-a"}));
    let votes = reports[0]["votes"].as_array().unwrap();
    assert!(votes.iter().any(|v| v["detector_id"] == "threshold" && v["anomalous"] == true));
    assert_eq!(reports[0]["tick"], 39);
}

#[test]
fn malformed_trace_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.jsonl");
    std::fs::write(&trace, "{\"service_id\":\"a\",\"metric\":\"cpu_pct\",\"layer\":\"dynamic\",\"value\":1,\"tick\":0}\nnot json\n")
        .unwrap();
    let out = mapek(&["analyze", "--trace", trace.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2"));
}
