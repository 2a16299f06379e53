use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use harmony::config::RunConfig;
use harmony::trainer::read_metrics;
use serde_json::Value;

fn harmony(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_harmony"))
        .args(args)
        .env("HARMONY_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let path = dir.join("run.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn invalid_config_exits_2_with_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"model": {"patch_size": 5}}"#).unwrap();
    let out = harmony(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("patch_size"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = harmony(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "usage");
}

#[test]
fn diverging_run_exits_3_naming_the_component() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::tiny();
    cfg.schedule.base_lr = 1e300;
    cfg.schedule.warmup_epochs = 0.0;
    cfg.optimizer.clip_norm = None;
    let path = write_config(dir.path(), &cfg);
    let out = harmony(&["train", "--config", &path, "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "non_finite");
    assert!(err["component"].is_string());
    assert!(err["step"].as_u64().unwrap() >= 1);
}

#[test]
fn gen_data_writes_manifest_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::tiny();
    cfg.data.n_samples = 12;
    cfg.train.batch_size = 4;
    let path = write_config(dir.path(), &cfg);
    let data = dir.path().join("data");
    let out = harmony(&["gen-data", "--config", &path, "--out", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["samples"], 12);
    assert!(data.join("manifest.jsonl").exists());
    let images = fs::read_dir(data.join("images"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ppm"))
        .count();
    assert_eq!(images, 12);
}

#[test]
fn train_then_resume_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::tiny();
    cfg.data.n_samples = 32;
    cfg.train.checkpoint_every = Some(1);
    cfg.eval.samples = 32;
    cfg.eval.probe_train_samples = 32;
    cfg.eval.probe_epochs = 10;
    let path = write_config(dir.path(), &cfg);
    let run = dir.path().join("run");

    let out = harmony(&["train", "--config", &path, "--out", s(&run), "--deterministic"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    let steps = summary["steps"].as_u64().unwrap();
    assert_eq!(steps, 4);
    for f in [
        "config.json",
        "metrics.jsonl",
        "eval.csv",
        "eval.json",
        "checkpoint_final.bin",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let full = read_metrics(&run.join("metrics.jsonl")).unwrap();
    assert_eq!(full.len() as u64, steps);

    // resume from the end of epoch one into a fresh directory and finish
    let resumed = dir.path().join("resumed");
    let ckpt = run.join("checkpoint_000002.bin");
    let out = harmony(&[
        "train",
        "--config",
        &path,
        "--out",
        s(&resumed),
        "--deterministic",
        "--resume",
        s(&ckpt),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tail = read_metrics(&resumed.join("metrics.jsonl")).unwrap();
    assert_eq!(tail.len(), 2);
    for (a, b) in full[2..].iter().zip(&tail) {
        assert_eq!(a.total.to_bits(), b.total.to_bits());
    }

    let eval_out = dir.path().join("eval");
    let out = harmony(&[
        "eval",
        "--config",
        &path,
        "--out",
        s(&eval_out),
        "--checkpoint",
        s(&run.join("checkpoint_final.bin")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = fs::read_to_string(run.join("eval.csv")).unwrap();
    let b = fs::read_to_string(eval_out.join("eval.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gradcheck_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = harmony(&["gradcheck", "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert!(report["checks"].as_array().unwrap().len() >= 9);
    assert!(String::from_utf8_lossy(&out.stdout).lines().all(|l| l.ends_with("ok")));
}
