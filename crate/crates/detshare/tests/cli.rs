use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn detshare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_detshare")).args(args).output().unwrap()
}

fn config(name: &str) -> String {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs")).join(name).display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn out_path(dir: &tempfile::TempDir, name: &str) -> (PathBuf, String) {
    let p = dir.path().join(name);
    let s = p.display().to_string();
    (p, s)
}

#[test]
fn empty_scenario_reports_zero_requests() {
    let o = detshare(&["simulate", &config("empty.json")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["requests"], 0);
    assert_eq!(v["completed_requests"], 0);
    assert_eq!(v["jobs"].as_array().unwrap().len(), 0);
}

#[test]
fn missing_config_exits_two() {
    let o = detshare(&["simulate", "/definitely/not/here.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("not/here.json"));
}

#[test]
fn unknown_policy_exits_two_and_lists_the_choices() {
    let o = detshare(&["simulate", &config("colocation.json"), "--policy", "round-robin"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for name in ["slo-aware", "tpot-first", "temporal", "static"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn malformed_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let (p, s) = out_path(&dir, "bad.json");
    std::fs::write(&p, r#"{"devices": [{"tiers": ["half"]}]}"#).unwrap();
    let o = detshare(&["simulate", &s]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("half"));
}

#[test]
fn simulate_writes_metrics_log_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (out, out_s) = out_path(&dir, "metrics.json");
    let (log, log_s) = out_path(&dir, "events.jsonl");
    let (csv, csv_s) = out_path(&dir, "latency.csv");
    let o = detshare(&[
        "simulate",
        &config("bursty.json"),
        "--policy",
        "tpot-first",
        "--seed",
        "3",
        "--log",
        &log_s,
        "--out",
        &out_s,
        "--csv",
        &csv_s,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m: Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(m["policy"], "tpot-first");
    let requests = m["requests"].as_u64().unwrap();
    assert!(requests > 0);
    let log = std::fs::read_to_string(log).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first["t"].is_string() && first["seq"].is_u64() && first["kind"].is_string());
    let csv = std::fs::read_to_string(csv).unwrap();
    assert!(csv.starts_with("job,arrival,ttft,tpot,e2e,ttft_violated,tpot_violated\n"));
    assert_eq!(csv.lines().count() as u64, 1 + m["completed_requests"].as_u64().unwrap());
}

#[test]
fn divergence_sweep_has_a_row_per_seed_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let (out, out_s) = out_path(&dir, "sweep.csv");
    let o = detshare(&[
        "divergence-sweep",
        "--format",
        "fp16",
        "--n",
        "4096",
        "--splits",
        "1,2,4,8,16,32,64",
        "--seeds",
        "100",
        "--out",
        &out_s,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("format,n,g_i,g_j,seed,delta"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 100 * 7);
    assert!(rows.iter().all(|r| r.len() == 6 && r[0] == "fp16" && r[1] == "4096"));
    // The unsplit column is the reference itself.
    assert!(rows.iter().filter(|r| r[3] == "1").all(|r| r[5] == "0"));
}

#[test]
fn compare_reports_both_normalized_throughputs() {
    let o = detshare(&["compare", &config("colocation-temporal.json"), &config("colocation.json")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let runs = v["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0]["policy"], "temporal");
    assert_eq!(runs[1]["policy"], "slo-aware");
    let agg: Vec<f64> = runs.iter().map(|r| r["aggregate_normalized"].as_str().unwrap().parse().unwrap()).collect();
    assert!(agg[1] > agg[0], "{agg:?}");
}
