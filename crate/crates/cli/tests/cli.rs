use std::path::Path;
use std::process::{Command, Output};

fn airseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_airseg"))
        .args(args)
        .env("AIRSEG_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = airseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn assert_single_error(out: &Output) {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with("error: "), "{err}");
}

fn resolved(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("config.resolved.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_phantoms(dir: &Path, count: &str) {
    ok(&[
        "phantom", "--out", s(dir), "--count", count, "--depth", "2", "--dims", "32,32,40",
        "--root-start", "16,16,4", "--segment-length", "10", "--seed", "5",
    ]);
}

#[test]
fn phantom_prep_report_round() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    small_phantoms(&raw, "3");
    for sub in ["images", "labels", "truth"] {
        assert_eq!(std::fs::read_dir(raw.join(sub)).unwrap().count(), 3, "{sub}");
    }
    let truth: serde_json::Value =
        serde_json::from_slice(&std::fs::read(raw.join("truth/phantom_001.json")).unwrap()).unwrap();
    assert_eq!(truth["spec"]["seed"], 6);
    assert_eq!(truth["branches"].as_array().unwrap().len(), 3);

    let prepped = tmp.path().join("prep");
    ok(&["prep", "--data", s(&raw), "--out", s(&prepped), "--val-fraction", "0.34"]);
    let manifest = std::fs::read_to_string(prepped.join("manifest.csv")).unwrap();
    assert!(manifest.starts_with("scan_id,z,split\n"));
    assert!(manifest.contains(",internal_val\n") && manifest.contains(",train\n"));

    let report = tmp.path().join("report");
    ok(&["report", "--mask-dir", s(&raw.join("labels")), "--out", s(&report)]);
    let text = std::fs::read_to_string(report.join("report.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",1")), "{text}");

    let metrics = tmp.path().join("eval");
    ok(&["eval", "--pred-dir", s(&raw.join("labels")), "--gt-dir", s(&raw.join("labels")), "--out", s(&metrics)]);
    let text = std::fs::read_to_string(metrics.join("metrics.csv")).unwrap();
    assert!(text.lines().last().unwrap().starts_with("mean±std,1±0,0±0,0±0,1±0,1±0,"), "{text}");
}

#[test]
fn flags_override_config_file_and_are_echoed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"seed": 3, "threshold": 0.7, "phantom": {"depth": 2, "dims": [32, 32, 40], "root_start": [16, 16, 4], "segment_length": 10}}"#)
        .unwrap();
    let out = tmp.path().join("ph");
    ok(&["phantom", "--config", s(&cfg), "--out", s(&out), "--seed", "4"]);
    let r = resolved(&out);
    assert_eq!(r["seed"], 4);
    assert_eq!(r["threshold"], 0.7);
    assert_eq!(r["phantom"]["depth"], 2);
    assert_eq!(r["phantom"]["seed"], 4);
}

#[test]
fn failures_print_one_error_line() {
    let tmp = tempfile::tempdir().unwrap();
    assert_single_error(&airseg(&["frobnicate"]));
    assert_single_error(&airseg(&["train", "--epochs", "many"]));

    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"learning_rate": 1}"#).unwrap();
    let out = airseg(&["prep", "--config", s(&cfg), "--data", s(tmp.path()), "--out", s(tmp.path())]);
    assert_single_error(&out);
    assert_eq!(out.status.code(), Some(1));

    let missing = airseg(&["predict", "--checkpoint", "/nonexistent.mseg", "--input", s(tmp.path()), "--out", s(tmp.path())]);
    assert_single_error(&missing);

    let threads = Command::new(env!("CARGO_BIN_EXE_airseg"))
        .args(["report", "--mask-dir", s(tmp.path()), "--out", s(tmp.path())])
        .env("AIRSEG_THREADS", "zero")
        .output()
        .unwrap();
    assert_single_error(&threads);
}

#[test]
fn failed_eval_leaves_no_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    small_phantoms(&raw, "2");
    let lonely = tmp.path().join("lonely");
    std::fs::create_dir_all(&lonely).unwrap();
    std::fs::copy(raw.join("labels/phantom_000.nii.gz"), lonely.join("other.nii.gz")).unwrap();
    let out_dir = tmp.path().join("eval");
    let out = airseg(&["eval", "--pred-dir", s(&lonely), "--gt-dir", s(&raw.join("labels")), "--out", s(&out_dir)]);
    assert_single_error(&out);
    assert!(!out_dir.join("metrics.csv").exists());
}

#[test]
fn train_resume_and_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    small_phantoms(&raw, "3");
    let prepped = tmp.path().join("prep");
    ok(&["prep", "--data", s(&raw), "--out", s(&prepped), "--val-fraction", "0.34"]);
    let arch = ["--backbone-widths", "4,6,8", "--bifpn-width", "6", "--bifpn-repeats", "1", "--head-width", "6"];
    let common = ["--crop-size", "16", "--batch-size", "4", "--lr0", "0.001", "--seed", "2"];

    let straight = tmp.path().join("straight");
    let mut args = vec!["train", "--data", s(&prepped), "--out", s(&straight), "--epochs", "2"];
    args.extend(arch);
    args.extend(common);
    ok(&args);
    let curves = std::fs::read_to_string(straight.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 3);
    assert!(straight.join("best.mseg").is_file() && straight.join("last.mseg").is_file());

    let split = tmp.path().join("split");
    let mut args = vec!["train", "--data", s(&prepped), "--out", s(&split), "--epochs", "1"];
    args.extend(arch);
    args.extend(common);
    ok(&args);
    let last = split.join("last.mseg");
    let mut args = vec!["train", "--data", s(&prepped), "--out", s(&split), "--epochs", "2", "--resume", s(&last)];
    args.extend(arch);
    args.extend(common);
    ok(&args);
    assert_eq!(std::fs::read_to_string(split.join("curves.csv")).unwrap(), curves);
    assert_eq!(std::fs::read(split.join("last.mseg")).unwrap(), std::fs::read(straight.join("last.mseg")).unwrap());

    let pred = tmp.path().join("pred");
    ok(&["predict", "--checkpoint", s(&straight.join("best.mseg")), "--input", s(&prepped.join("images")), "--out", s(&pred)]);
    assert_eq!(std::fs::read_dir(pred.join("masks")).unwrap().count(), 3);
    assert_eq!(std::fs::read_dir(pred.join("prob")).unwrap().count(), 3);
}
