use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "[corpus]\nsessions = 8\n[train]\nepochs = 3\n";

fn malefic(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_malefic"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("MALEFIC_THREADS")
        .output()
        .unwrap()
}

fn json_error(output: &Output) -> serde_json::Value {
    let text = String::from_utf8(output.stderr.clone()).unwrap();
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    fs::write(&path, SMALL).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_then_classify() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("artifacts");
    let config = small_config(dir.path());

    let run = malefic(&out, &["--config", &config, "run"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(summary["executed"].as_array().unwrap().len(), 6);
    for file in ["config.effective.toml", "checkpoints/model.ckpt.json", "reports/eval.txt", "interpret/interpret.json"] {
        assert!(out.join(file).is_file(), "{file}");
    }

    let again = malefic(&out, &["--json", "--config", &config, "run"]);
    assert_eq!(again.status.code(), Some(2));
    let err = json_error(&again);
    assert_eq!(err["error"], "prior_run");
    assert_eq!(err["exit_code"], 2);

    let resumed = malefic(&out, &["run", "--resume"]);
    assert!(resumed.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&resumed.stdout).unwrap();
    assert!(summary["executed"].as_array().unwrap().is_empty());

    let mismatch = malefic(&out, &["--json", "--seed", "7", "eval"]);
    assert_eq!(mismatch.status.code(), Some(2));
    assert_eq!(json_error(&mismatch)["error"], "config_mismatch");

    let eval = malefic(&out, &["eval"]);
    assert!(eval.status.success());

    let records = dir.path().join("records.jsonl");
    let classify = malefic(&out, &["classify", "--output", records.to_str().unwrap()]);
    assert!(classify.status.success(), "{}", String::from_utf8_lossy(&classify.stderr));
    let lines: Vec<serde_json::Value> = fs::read_to_string(&records)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!lines.is_empty());
    assert!(lines.iter().all(|r| r["top_modality"].is_string() && r["class_probs"]["CT"].is_number()));

    let stdout = malefic(&out, &["classify", "--modalities", "text"]);
    assert!(stdout.status.success());
    assert_eq!(String::from_utf8(stdout.stdout).unwrap().lines().count(), lines.len());

    let body = malefic(&out, &["--json", "classify", "--modalities", "body"]);
    assert_eq!(body.status.code(), Some(2));
    assert_eq!(json_error(&body)["error"], "modality_mismatch");
}

#[test]
fn validation_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("artifacts");

    let missing = malefic(&out, &["--json", "train"]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(json_error(&missing)["error"], "missing_stage_input");

    let preset = malefic(&out, &["--json", "--preset", "huge", "run"]);
    assert_eq!(preset.status.code(), Some(2));
    assert_eq!(json_error(&preset)["error"], "usage");

    let modalities = malefic(&out, &["--modalities", "text,smell", "run"]);
    assert_eq!(modalities.status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nepochz = 1\n").unwrap();
    let config = malefic(&out, &["--json", "--config", bad.to_str().unwrap(), "run"]);
    assert_eq!(config.status.code(), Some(2));
    assert_eq!(json_error(&config)["error"], "config");
    assert!(!out.exists());

    let threads = Command::new(env!("CARGO_BIN_EXE_malefic"))
        .args(["--out", out.to_str().unwrap(), "--json", "gen-corpus"])
        .env("MALEFIC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
    assert_eq!(json_error(&threads)["error"], "config");
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("artifacts");
    let classify = malefic(&out, &["classify"]);
    assert_eq!(classify.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&classify.stderr).starts_with("error:"));
}
