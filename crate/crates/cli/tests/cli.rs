use std::path::Path;
use std::process::{Command, Output};

fn flowimg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowimg")).args(args).env_remove("FLOWIMG_DATA_DIR").output().expect("runs")
}

fn ok(args: &[&str]) -> String {
    let out = flowimg(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

const SMALL: [&str; 10] = ["--n", "10", "--m", "10", "--t-unit", "6", "--epsilon", "30", "--horizon", "30"];

fn small_raw(root: &Path) -> String {
    let raw = root.join("raw");
    ok(&[
        "synth",
        "--seed",
        "3",
        "--days",
        "2",
        "--duration",
        "900",
        "--regime-switching",
        "--out",
        raw.to_str().unwrap(),
    ]);
    raw.to_str().unwrap().to_string()
}

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(args: Vec<String>) -> Output {
    let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    flowimg(&refs)
}

#[test]
fn full_day_dataset_has_8611_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let day = tmp.path().join("day");
    let ds = tmp.path().join("ds");
    ok(&["synth", "--seed", "7", "--duration", "86400", "--out", day.to_str().unwrap()]);
    ok(&["dataset", "--in", day.to_str().unwrap(), "--out", ds.to_str().unwrap(), "--no-images"]);
    let m = manifest(&ds);
    assert_eq!(m["details"]["samples"], 8611);
    assert_eq!(m["details"]["walk_forward"]["reference_count"], 8616);
    assert_eq!(m["details"]["split_sizes"], serde_json::json!([5166, 1722, 1723]));
}

#[test]
fn naive_training_needs_no_fit_and_lineage_is_enforced() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = small_raw(tmp.path());
    let ds_a = tmp.path().join("a");
    let ds_b = tmp.path().join("b");
    let models = tmp.path().join("m");
    assert!(run(with(&["dataset", "--in", &raw, "--out", ds_a.to_str().unwrap()], &SMALL)).status.success());
    let mut other = SMALL;
    other[9] = "20";
    assert!(run(with(&["dataset", "--in", &raw, "--out", ds_b.to_str().unwrap()], &other)).status.success());

    let out =
        ok(&["train", "--dataset", ds_a.to_str().unwrap(), "--model", "naive", "--out", models.to_str().unwrap()]);
    assert!(out.contains("naive.ckpt"));
    let preds = std::fs::read_to_string(models.join("naive.predictions.csv")).unwrap();
    let samples = manifest(&ds_a)["details"]["samples"].as_u64().unwrap() as usize;
    assert_eq!(preds.lines().count(), samples + 1);
    assert!(std::fs::read_to_string(models.join("config.toml")).unwrap().contains("horizon_s = 30"));

    let ckpt = models.join("naive.ckpt");
    let report = tmp.path().join("r");
    let text = ok(&[
        "eval",
        "--model-ckpt",
        ckpt.to_str().unwrap(),
        "--dataset",
        ds_a.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(text.contains("naive") && text.contains("8616"));

    let bad = flowimg(&[
        "eval",
        "--model-ckpt",
        ckpt.to_str().unwrap(),
        "--dataset",
        ds_b.to_str().unwrap(),
        "--out",
        tmp.path().join("r2").to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(3));
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.starts_with("error: LineageMismatch:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn usage_errors_exit_2() {
    let out = flowimg(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: Usage:"));
    let out = flowimg(&["train", "--dataset", "x", "--model", "lstm", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));
    let out = flowimg(&["synth", "--out", "/nonexistent/never", "--n", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: InvalidConfig:"));
}

#[test]
fn missing_input_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = flowimg(&[
        "dataset",
        "--in",
        tmp.path().join("nope").to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: IncompleteInput:"));
}

#[test]
fn outputs_are_idempotent_and_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = small_raw(tmp.path());
    let ds = tmp.path().join("ds");
    let args = with(&["dataset", "--in", &raw, "--out", ds.to_str().unwrap()], &SMALL);
    assert!(run(args.clone()).status.success());
    let first = std::fs::read(ds.join("manifest.json")).unwrap();
    let again = run(args.clone());
    assert!(String::from_utf8_lossy(&again.stdout).contains("up to date"));
    assert_eq!(std::fs::read(ds.join("manifest.json")).unwrap(), first);

    let mut changed = args.clone();
    changed.extend(["--pad".to_string(), "0".to_string()]);
    let refused = run(changed.clone());
    assert_eq!(refused.status.code(), Some(2));
    changed.push("--force".into());
    assert!(run(changed).status.success());
    assert_ne!(std::fs::read(ds.join("manifest.json")).unwrap(), first);

    let mut forced = args;
    forced.push("--force".into());
    assert!(run(forced).status.success());
    assert_eq!(std::fs::read(ds.join("manifest.json")).unwrap(), first);
}

#[test]
fn config_file_flags_and_data_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "horizon_s = 40\n[encoding]\nn = 10\nm = 10\nt_unit_s = 6\nepsilon_s = 30\n[synth]\ndays = 1\nduration_s = 600\n").unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_flowimg"))
        .args(["--config", cfg.to_str().unwrap(), "synth", "--out", "raw", "--seed", "9"])
        .env("FLOWIMG_DATA_DIR", tmp.path())
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let written = std::fs::read_to_string(tmp.path().join("raw/config.toml")).unwrap();
    assert!(written.contains("seed = 9") && written.contains("duration_s = 600"));
    let status = Command::new(env!("CARGO_BIN_EXE_flowimg"))
        .args(["--config", cfg.to_str().unwrap(), "dataset", "--in", "raw", "--out", "ds", "--horizon", "30"])
        .env("FLOWIMG_DATA_DIR", tmp.path())
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let m = manifest(&tmp.path().join("ds"));
    assert_eq!(m["details"]["horizon_s"], 30);
    assert_eq!(m["details"]["samples"], (600 - 60 - 30) / 30 + 1);
}

#[test]
fn encode_featurize_predict_and_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = small_raw(tmp.path());
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_string();
    assert!(run(with(&["encode", "--in", &raw, "--out", &p("img"), "--png-dir", &p("png")], &SMALL)).status.success());
    assert!(run(with(&["featurize", "--in", &raw, "--out", &p("feat")], &SMALL)).status.success());
    assert!(run(with(&["dataset", "--in", &raw, "--out", &p("ds")], &SMALL)).status.success());
    let ds_images = std::fs::read(tmp.path().join("ds/images.fimg")).unwrap();
    assert_eq!(std::fs::read(tmp.path().join("img/images.fimg")).unwrap(), ds_images);
    assert_eq!(
        std::fs::read(tmp.path().join("feat/features.csv")).unwrap(),
        std::fs::read(tmp.path().join("ds/features.csv")).unwrap()
    );
    let n = manifest(&tmp.path().join("ds"))["details"]["samples"].as_u64().unwrap() as usize;
    assert_eq!(std::fs::read_dir(tmp.path().join("png")).unwrap().count(), n);

    assert!(run(with(
        &["train", "--dataset", &p("ds"), "--model", "naive-cnn,garch", "--out", &p("m"), "--epochs", "1"],
        &SMALL
    ))
    .status
    .success());
    let ckpt = p("m/naive-cnn.ckpt");
    ok(&[
        "predict",
        "--model-ckpt",
        &ckpt,
        "--dataset",
        &p("ds"),
        "--out",
        &p("pred.csv"),
        "--embeddings",
        &p("emb.fimg"),
    ]);
    assert_eq!(std::fs::read_to_string(p("pred.csv")).unwrap().lines().count(), n + 1);

    let text = ok(&["inspect", &p("emb.fimg")]);
    assert!(text.contains(&format!("shape [{n}, 128]")), "{text}");
    assert!(ok(&["inspect", &ckpt]).contains("\"model\": \"naive-cnn\""));
    assert!(ok(&["inspect", &p("m/garch.ckpt")]).contains("\"garch\""));
    let text = ok(&["inspect", &p("ds"), "--png-dir", &p("dump"), "--range", "0..3"]);
    assert!(text.contains("\"kind\": \"dataset\"") && text.contains("wrote 3 images"));
}
