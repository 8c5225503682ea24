use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use vlm_core::checkpoint::save_model;
use vlm_core::model::Vlm;
use vlm_core::synth::QA_VALUES;
use vlm_core::ModelConfig;

fn vlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlm")).args(args).output().expect("spawn vlm")
}

fn ok(args: &[&str]) -> String {
    let out = vlm(args);
    assert!(
        out.status.success(),
        "vlm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_data_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for f in [&a, &b] {
        ok(&["synth-data", "--task", "toy-qa", "--n", "3", "--seed", "7", "--out", p(f)]);
    }
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_eq!(bytes.iter().filter(|&&c| c == b'\n').count(), 3);
}

#[test]
fn zero_rows_writes_an_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("empty.jsonl");
    ok(&["synth-data", "--task", "toy-nmt", "--n", "0", "--out", p(&f)]);
    assert!(std::fs::read(&f).unwrap().is_empty());
}

#[test]
fn unknown_task_is_a_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = vlm(&["synth-data", "--task", "toy-nope", "--n", "3", "--out", p(&dir.path().join("x"))]);
    assert!(!out.status.success());
    let rec: Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert!(rec["error"].is_string());
}

#[test]
fn config_errors_list_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let out = vlm(&[
        "finetune",
        "--task",
        "toy-nope",
        "--batch-size",
        "0",
        "--lr=-1",
        "--out",
        p(dir.path()),
    ]);
    assert!(!out.status.success());
    let rec: Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(rec["error"], "config");
    let v = rec["violations"].as_array().unwrap();
    assert!(v.len() >= 3, "{v:?}");
}

#[test]
fn bad_flags_are_a_json_error() {
    let out = vlm(&["synth-data", "--task", "toy-qa"]);
    assert_eq!(out.status.code(), Some(2));
    let rec: Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(rec["error"], "usage");
}

#[test]
fn param_report_matches_the_stored_ratios() {
    let out = ok(&["param-report", "--preset", "gpt2-small", "--tasks", "five-task", "--json"]);
    let ratios: Vec<f64> = out
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["ratio"].as_f64().unwrap())
        .collect();
    assert_eq!(ratios.len(), 3);
    assert!((ratios[0] - 5.0).abs() < 0.005);
    assert!((ratios[1] - 2.55).abs() < 0.02);
    assert!((ratios[2] - 1.13).abs() < 0.02);
    let text = ok(&["param-report", "--regime", "adapter"]);
    assert!(text.contains("ratio") && text.contains("1.12x"), "{text}");
}

#[test]
fn ablated_finetune_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let pre = dir.path().join("pre");
    let fine = dir.path().join("fine");
    ok(&["pretrain", "--steps", "3", "--batch-size", "4", "--synth-n", "40", "--out", p(&pre)]);
    let ckpt = pre.join("seed-0").join("checkpoints");
    let line = ok(&[
        "finetune",
        "--init",
        p(&ckpt),
        "--task",
        "toy-qa",
        "--regime",
        "adapter",
        "--ablate",
        "no_task_emb",
        "--steps",
        "3",
        "--batch-size",
        "4",
        "--synth-n",
        "40",
        "--eval-n",
        "5",
        "--out",
        p(&fine),
    ]);
    let rec: Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(rec["steps"], 3);
    assert_eq!(rec["eval"]["ablation"], serde_json::json!(["no_task_emb"]));
    let run = fine.join("seed-0");
    for f in ["config.json", "metrics.jsonl", "eval.json", "tokenizer.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let cfg: Value = serde_json::from_slice(&std::fs::read(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["ablation"]["no_task_emb"], true);

    let report = run.join("report.json");
    let table = ok(&[
        "evaluate",
        "--model",
        p(&run.join("checkpoints")),
        "--task",
        "toy-qa",
        "--synth-n",
        "5",
        "--out",
        p(&report),
    ]);
    assert!(table.starts_with("task"), "{table}");
    let r: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["ablation"], serde_json::json!(["no_task_emb"]));

    let g = ok(&[
        "generate",
        "--model",
        p(&run.join("checkpoints")),
        "--task",
        "toy-qa",
        "--input",
        r#"{"task":"toy-qa","segments":[{"seg":"document","text":"k0 v1 k1 v2 k2 v3"},{"seg":"question","text":"k1"}]}"#,
    ]);
    let g: Value = serde_json::from_str(g.trim()).unwrap();
    assert!(g["output"].is_string());
}

#[test]
fn untrained_backbone_is_at_chance_on_qa() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("checkpoints");
    let cfg = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::toy()
    };
    save_model(&ckpt, &Vlm::init(cfg, 0).unwrap()).unwrap();
    let report = dir.path().join("eval.json");
    ok(&[
        "evaluate",
        "--model",
        p(&ckpt),
        "--task",
        "toy-qa",
        "--unsteered",
        "--synth-n",
        "200",
        "--out",
        p(&report),
    ]);
    let r: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let em = r["tasks"]["toy-qa"]["metrics"]["exact_match"].as_f64().unwrap();
    assert!(em <= 2.0 / QA_VALUES as f64, "exact match {em}");
}
