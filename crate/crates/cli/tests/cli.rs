use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flipkit_core::corpus::{save_corpus, TaskId};
use flipkit_core::synthetic::{flip_corpus, recognition_corpus, SyntheticSpec};
use serde_json::Value;
use tempfile::TempDir;

fn flipkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flipkit")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

struct Fixture {
    dir: TempDir,
    erc: PathBuf,
    efr: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let erc = dir.path().join("erc.json");
        let efr = dir.path().join("efr.json");
        save_corpus(&recognition_corpus(&SyntheticSpec::default()), &erc).unwrap();
        save_corpus(&flip_corpus(&SyntheticSpec::default(), TaskId::FLIP_ENGLISH), &efr).unwrap();
        Fixture { dir, erc, efr }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cache(&self, task: &str, data: &Path) -> PathBuf {
        let cache = self.path(&format!("cache{task}.bin"));
        stdout_json(&flipkit(&[
            "embed", "--task", task, "--data", s(data), "--cache", s(&cache), "--provider", "stub", "--dim", "8", "--quiet",
        ]));
        cache
    }

    fn trained_efr(&self) -> (PathBuf, PathBuf) {
        let cache = self.cache("3", &self.efr);
        let ckpt = self.path("efr.ckpt");
        let config = self.path("small.json");
        std::fs::write(&config, r#"{"efr": {"model_dim": 8, "heads": 2, "ff_dim": 16, "history_dim": 4}}"#).unwrap();
        stdout_json(&flipkit(&[
            "train-efr", "--task", "3", "--data", s(&self.efr), "--cache", s(&cache), "--out", s(&ckpt),
            "--epochs", "2", "--learning-rate", "0.001", "--config", s(&config), "--quiet",
        ]));
        (ckpt, cache)
    }
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(flipkit(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(flipkit(&["stats", "--task", "2", "--data", "x.json", "--bogus"]).status.code(), Some(1));
    assert_eq!(flipkit(&["stats", "--task", "4", "--data", "x.json"]).status.code(), Some(1));
    assert_eq!(flipkit(&[]).status.code(), Some(1));
    let help = flipkit(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("ablate-ptz"));
    assert_eq!(flipkit(&["--version"]).status.code(), Some(0));
}

#[test]
fn missing_file_is_a_runtime_failure() {
    let out = flipkit(&["stats", "--task", "2", "--data", "/nonexistent/flips.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
}

#[test]
fn malformed_json_is_invalid_input() {
    let f = Fixture::new();
    let bad = f.path("bad.json");
    std::fs::write(&bad, "[{\"episode\": \"e\", ").unwrap();
    let out = flipkit(&["stats", "--task", "2", "--data", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
}

#[test]
fn mismatched_prediction_lengths_are_rejected() {
    let f = Fixture::new();
    let pred = f.path("pred.json");
    std::fs::write(&pred, r#"[{"episode": "x", "triggers": [0, 1]}]"#).unwrap();
    let out = flipkit(&["eval", "--task", "3", "--gold", s(&f.efr), "--pred", s(&pred)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    assert!(!out.stderr.is_empty());
}

#[test]
fn stats_report_skew_rows() {
    let f = Fixture::new();
    let before = std::fs::read(&f.efr).unwrap();
    let v = stdout_json(&flipkit(&["stats", "--task", "3", "--data", s(&f.efr), "--ptz", "--quiet"]));
    for row in ["original", "setting_1", "setting_2"] {
        let r = &v["skew"][row];
        assert!(r["count_0"].is_u64() && r["count_1"].is_u64(), "{row}: {r}");
    }
    assert!(v["stats"]["episodes"].as_u64().unwrap() > 0);
    assert_eq!(std::fs::read(&f.efr).unwrap(), before);
}

#[test]
fn baselines_match_their_task() {
    let f = Fixture::new();
    let v = stdout_json(&flipkit(&["baseline", "--task", "1", "--kind", "neutral", "--data", s(&f.erc), "--quiet"]));
    assert!(v["weighted_f1"].as_f64().unwrap() >= 0.0);
    let v = stdout_json(&flipkit(&["baseline", "--task", "3", "--kind", "rule", "--data", s(&f.efr), "--quiet"]));
    let f1 = v["positive"]["f1"].as_f64().unwrap();
    assert!(f1 > 0.0 && f1 <= 1.0);
    assert_eq!(flipkit(&["baseline", "--task", "1", "--kind", "rule", "--data", s(&f.erc)]).status.code(), Some(1));
}

#[test]
fn output_flag_writes_a_file() {
    let f = Fixture::new();
    let out_path = f.path("stats.json");
    let out = flipkit(&["stats", "--task", "1", "--data", s(&f.erc), "--output", s(&out_path), "--quiet"]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(v["task"], 1);
}

#[test]
fn trigger_pipeline_predicts_evaluates_and_ablates() {
    let f = Fixture::new();
    let (ckpt, cache) = f.trained_efr();
    assert!(ckpt.with_extension("ckpt.log.jsonl").is_file());

    let pred = flipkit(&["predict-efr", "--ckpt", s(&ckpt), "--data", s(&f.efr), "--cache", s(&cache), "--quiet"]);
    let v = stdout_json(&pred);
    let entries = v.as_array().unwrap();
    let gold: Vec<Value> = serde_json::from_str(&std::fs::read_to_string(&f.efr).unwrap()).unwrap();
    assert_eq!(entries.len(), gold.len());
    for (p, g) in entries.iter().zip(&gold) {
        assert_eq!(p["episode"], g["episode"]);
        assert_eq!(p["triggers"].as_array().unwrap().len(), g["utterances"].as_array().unwrap().len());
    }

    let pred_path = f.path("pred.json");
    std::fs::write(&pred_path, &pred.stdout).unwrap();
    let report = stdout_json(&flipkit(&["eval", "--task", "3", "--gold", s(&f.efr), "--pred", s(&pred_path), "--quiet"]));
    let c = &report["positive"]["confusion"];
    let total: u64 = ["tn", "fp", "fn", "tp"].iter().map(|k| c[k].as_u64().unwrap()).sum();
    let utterances: usize = gold.iter().map(|g| g["utterances"].as_array().unwrap().len()).sum();
    assert_eq!(total, utterances as u64);

    let a = stdout_json(&flipkit(&["ablate-ptz", "--ckpt", s(&ckpt), "--data", s(&f.efr), "--cache", s(&cache), "--quiet"]));
    assert_eq!(
        a["mask_count"].as_u64().unwrap(),
        a["positives_off"].as_u64().unwrap() - a["positives_on"].as_u64().unwrap()
    );
    // The wrong model kind is invalid input.
    let out = flipkit(&["predict-erc", "--ckpt", s(&ckpt), "--data", s(&f.efr), "--cache", s(&cache)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn recognition_pipeline_predicts_labels() {
    let f = Fixture::new();
    let cache = f.cache("1", &f.erc);
    let ckpt = f.path("erc.ckpt");
    stdout_json(&flipkit(&[
        "train-erc", "--task", "1", "--data", s(&f.erc), "--cache", s(&cache), "--out", s(&ckpt), "--epochs", "1", "--quiet",
    ]));
    let v = stdout_json(&flipkit(&["predict-erc", "--ckpt", s(&ckpt), "--data", s(&f.erc), "--cache", s(&cache), "--quiet"]));
    let first = &v.as_array().unwrap()[0];
    assert!(first["emotions"].as_array().unwrap().iter().all(Value::is_string));
    // Training a trigger model on recognition data is a usage error.
    let out = flipkit(&[
        "train-efr", "--task", "1", "--data", s(&f.erc), "--cache", s(&cache), "--out", s(&f.path("x.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!f.path("x.ckpt").exists());
}

#[test]
fn nonbinary_trigger_predictions_are_rejected() {
    let f = Fixture::new();
    let gold: Vec<Value> = serde_json::from_str(&std::fs::read_to_string(&f.efr).unwrap()).unwrap();
    let pred: Vec<Value> = gold
        .iter()
        .map(|g| {
            let n = g["utterances"].as_array().unwrap().len();
            serde_json::json!({"episode": g["episode"], "triggers": vec![0.5; n]})
        })
        .collect();
    let pred_path = f.path("pred.json");
    std::fs::write(&pred_path, serde_json::to_string(&pred).unwrap()).unwrap();
    let out = flipkit(&["eval", "--task", "3", "--gold", s(&f.efr), "--pred", s(&pred_path)]);
    assert_eq!(out.status.code(), Some(1));
}
