use std::path::Path;
use std::process::{Command, Output};

use ctrisk::io::{load_dataset, ColumnMap};
use ctrisk::simulation::{gen_dataset, Scenario, ScenarioSpec};
use ctrisk::{estimate_stwcr, make_folds, ModelSpecs, NuisanceSource, SmoothingParams, StwcrQuery};
use serde_json::Value;

fn ctrisk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctrisk"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn emit(dir: &Path, n: &str, seed: &str) -> std::path::PathBuf {
    let csv = dir.join(format!("draws-{seed}.csv"));
    let out = ctrisk(&["emit-draws", "--n", n, "--seed", seed, "--all-columns", "true", "--out", path_str(&csv)]);
    stdout(&out);
    csv
}

#[test]
fn simulate_smoke_writes_one_row_per_query() {
    let out = ctrisk(&[
        "simulate",
        "--n", "200",
        "--reps", "2",
        "--truth-mc-size", "100000",
        "--query", "stwcr:1:7",
        "--query", "stwcrve:1:0:8:7",
    ]);
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "scenario,n,query,truth,truth_mc_se,mean_estimate,pct_bias,coverage,mean_se,reps,failed"
    );
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("I,200,"));
    assert!(rows[1].contains("STWCRVE"));
}

#[test]
fn absent_arm_exits_nonzero_with_error_document() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("one-arm.csv");
    let mut text = String::from("y,a,s,b,x1\n");
    for i in 0..60 {
        text.push_str(&format!("{},0,{},{},{}\n", i % 2, 6.0 + (i % 7) as f64 * 0.3, 1 + i % 4, i % 3 / 2));
    }
    std::fs::write(&csv, text).unwrap();
    let out = ctrisk(&["estimate-stwcr", "--input", path_str(&csv), "--a", "1", "--s", "7", "--density-spec", "1,b,a,x1", "--outcome-spec", "1,s,a,b"]);
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let doc: Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(doc["error"]["kind"], "estimation");
    assert!(doc["error"]["message"].as_str().unwrap().contains("arm 1"));
}

#[test]
fn truth_cache_is_reused_by_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("truth.json");
    let out = ctrisk(&["truth", "--query", "stwcr:1:7", "--truth-mc-size", "100000", "--truth-cache", path_str(&cache)]);
    let doc: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let truth = doc["truths"][0]["truth"].as_f64().unwrap();
    assert!(truth > 0.0 && truth < 1.0);
    assert!(cache.exists());

    let out = ctrisk(&[
        "simulate", "--n", "150", "--reps", "2", "--query", "stwcr:1:7",
        "--truth-mc-size", "100000", "--truth-cache", path_str(&cache),
    ]);
    let text = stdout(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("truth cache hit"));
    let row = csv::Reader::from_reader(text.as_bytes()).records().next().unwrap().unwrap();
    assert_eq!(&row[2], "STWCR(a=1, s=7)");
    assert_eq!(row[3].parse::<f64>().unwrap(), truth);
}

#[test]
fn csv_round_trip_matches_in_memory_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let csv = emit(dir.path(), "500", "17");
    let out = ctrisk(&["estimate-stwcr", "--input", path_str(&csv), "--a", "1", "--s", "7", "--seed", "3"]);
    let doc: Value = serde_json::from_str(&stdout(&out)).unwrap();

    let data = gen_dataset(&ScenarioSpec { scenario: Scenario::I, n: 500, seed: 17 }).unwrap();
    assert_eq!(load_dataset(&csv, &ColumnMap::default(), None).unwrap(), data);
    let folds = make_folds(500, 5, 3).unwrap();
    let r = estimate_stwcr(
        &data,
        &StwcrQuery { a: 1, s: 7.0 },
        &SmoothingParams::default(),
        &folds,
        &NuisanceSource::Fitted(ModelSpecs::default()),
    )
    .unwrap();
    assert_eq!(doc["report"]["tau_hat"].as_f64().unwrap(), r.tau_hat);
    assert_eq!(doc["report"]["se"].as_f64().unwrap(), r.se);
    assert_eq!(doc["n"], 500);
    assert_eq!(doc["schema_version"], 1);
}

#[test]
fn repeated_runs_are_identical_apart_from_timestamp() {
    let dir = tempfile::tempdir().unwrap();
    let csv = emit(dir.path(), "400", "18");
    let args = ["estimate-stwcrve", "--input", path_str(&csv), "--a1", "1", "--a0", "0", "--s1", "8", "--s0", "7", "--threads", "1"];
    let strip = |text: String| -> String {
        text.lines().filter(|l| !l.trim_start().starts_with("\"timestamp\"")).collect::<Vec<_>>().join("\n")
    };
    let first = strip(stdout(&ctrisk(&args)));
    let second = strip(stdout(&ctrisk(&args)));
    assert_eq!(first, second);
    assert!(first.contains("\"delta_hat\""));
}

#[test]
fn config_file_supplies_options() {
    let dir = tempfile::tempdir().unwrap();
    let csv = emit(dir.path(), "300", "19");
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, format!(r#"{{"input": "{}", "a": 1, "s": 7.5, "format": "csv"}}"#, path_str(&csv))).unwrap();
    let text = stdout(&ctrisk(&["estimate-stwcr", "--config", path_str(&cfg), "--s", "8"]));
    let row = text.lines().nth(1).unwrap();
    assert!(row.starts_with("1,8,"), "{row}");
}

#[test]
fn emit_draws_default_columns() {
    let text = stdout(&ctrisk(&["emit-draws", "--n", "60", "--scenario", "III", "--seed", "2"]));
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "b,s,a,x1");
    assert_eq!(lines.count(), 60);
}
