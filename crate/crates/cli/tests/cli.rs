use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modalvgae"))
        .args(args)
        .arg("--config")
        .arg(smoke_config())
        .env("RUST_BACKTRACE", "0")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, seed: u64) {
    ok(&["generate", "--n", "24", "--seed", &seed.to_string(), "--out", s(dir)]);
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", s(data), "--out", s(out)];
    args.extend_from_slice(extra);
    ok(&args);
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn generate_is_byte_identical_and_counts_records() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    generate(&a, 7);
    generate(&b, 7);
    let (da, db) = (dir_bytes(&a), dir_bytes(&b));
    assert_eq!(da.len(), 25, "24 records plus the manifest");
    assert!(da == db);
}

#[test]
fn zero_samples_is_an_argument_error() {
    let t = tempfile::tempdir().unwrap();
    let out = run(&["generate", "--n", "0", "--out", s(&t.path().join("d"))]);
    assert!(!out.status.success());
    assert!(!t.path().join("d").exists());
}

#[test]
fn non_empty_output_needs_force() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    generate(&d, 1);
    let out = run(&["generate", "--n", "24", "--out", s(&d)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    ok(&["generate", "--n", "24", "--out", s(&d), "--force"]);
}

#[test]
fn invalid_config_leaves_no_output() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    for bad in ["train.lr_head=-1", "train.no_such_key=1", "model.n_modes=3"] {
        let out = run(&["generate", "--n", "24", "--out", s(&d), "--set", bad]);
        assert!(!out.status.success(), "{bad} accepted");
        assert!(!d.exists());
    }
}

#[test]
fn missing_dataset_is_a_clear_error() {
    let t = tempfile::tempdir().unwrap();
    let out = run(&["train", "--data", s(&t.path().join("nowhere")), "--out", s(&t.path().join("r"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no dataset"));
    assert!(!t.path().join("r").exists());
}

#[test]
fn pipeline_writes_every_artifact() {
    let t = tempfile::tempdir().unwrap();
    let p = |n: &str| t.path().join(n);
    generate(&p("data"), 3);
    train(&p("data"), &p("run"), &["--deterministic"]);
    train(&p("data"), &p("run2"), &["--deterministic"]);
    for f in ["best/ckpt.json", "best/ckpt.bin", "final/ckpt.json", "final/ckpt.bin", "metrics.csv", "train_log.json", "run_config.json"] {
        assert!(p("run").join(f).is_file(), "missing {f}");
    }
    assert_eq!(fs::read(p("run/metrics.csv")).unwrap(), fs::read(p("run2/metrics.csv")).unwrap());
    let rows = fs::read_to_string(p("run/metrics.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 9);

    ok(&["eval", "--run", s(&p("run")), "--data", s(&p("data")), "--out", s(&p("eval"))]);
    let report = read_json(&p("eval/report.json"));
    for key in ["n_samples", "modes", "mean_mac", "freq_mae", "damp_mae", "records"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    assert_eq!(report["modes"].as_array().unwrap().len(), 4);
    assert_eq!(read_json(&p("eval/calibration.json"))["freq"].as_array().unwrap().len(), 4);
    let plots: Vec<String> = fs::read_dir(p("eval/plots")).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    for prefix in ["error_hist_", "mac_box", "scatter_", "reliability_", "uncertainty_", "mode_shapes_"] {
        assert!(plots.iter().any(|f| f.starts_with(prefix) && f.ends_with(".svg")), "no {prefix} plot");
    }

    ok(&["eval", "--run", s(&p("run")), "--data", s(&p("data")), "--out", s(&p("eval_np")), "--no-plots"]);
    assert!(!p("eval_np/plots").exists());
    for f in ["report.json", "calibration.json", "records.csv", "modes.csv"] {
        assert_eq!(fs::read(p("eval").join(f)).unwrap(), fs::read(p("eval_np").join(f)).unwrap(), "{f} differs with plots off");
    }

    ok(&["predict", "--run", s(&p("run")), "--data", s(&p("data")), "--out", s(&p("pred"))]);
    let preds = read_json(&p("pred/predictions.json"));
    let first = &preds.as_array().unwrap()[0]["modes"][0];
    let (lo, f, hi) = (first["frequency_interval"]["lo"].as_f64().unwrap(), first["frequency_hz"].as_f64().unwrap(), first["frequency_interval"]["hi"].as_f64().unwrap());
    assert!(lo < f && f < hi);

    ok(&["study-noise", "--data", s(&p("data")), "--model", &format!("a={}", s(&p("run"))), "--snr", "clean,30,20,10", "--out", s(&p("noise"))]);
    let study = read_json(&p("noise/study.json"));
    assert_eq!(study["conditions"].as_array().unwrap().len(), 4);

    ok(&["compare", "--report", &format!("x={}", s(&p("eval"))), "--report", &format!("y={}", s(&p("eval_np"))), "--out", s(&p("cmp"))]);
    let table = read_json(&p("cmp/compare.json"));
    assert!(table["rows"][0]["winners"].as_array().unwrap().iter().all(|w| w == "tie"));
    let header = fs::read_to_string(p("cmp/compare.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap().split(',').count(), 10);

    ok(&["report", "--input", s(&p("eval")), "--out", s(&p("rep"))]);
    assert_eq!(fs::read(p("eval/report.json")).unwrap(), fs::read(p("rep/report.json")).unwrap());
}

#[test]
fn eval_refuses_foreign_normalization() {
    let t = tempfile::tempdir().unwrap();
    let p = |n: &str| t.path().join(n);
    generate(&p("a"), 3);
    generate(&p("b"), 4);
    train(&p("a"), &p("run"), &[]);
    let out = run(&["eval", "--run", s(&p("run")), "--data", s(&p("b")), "--out", s(&p("e"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("normalization"));
    assert!(!p("e").exists());
}

#[test]
fn sparsity_study_covers_every_fraction() {
    let t = tempfile::tempdir().unwrap();
    let p = |n: &str| t.path().join(n);
    generate(&p("data"), 5);
    train(&p("data"), &p("run"), &["--baseline"]);
    ok(&[
        "study-sparsity",
        "--data",
        s(&p("data")),
        "--model",
        &format!("b={}", s(&p("run"))),
        "--fractions",
        "5,10,20,30,50,80,95",
        "--out",
        s(&p("sp")),
        "--no-plots",
    ]);
    let study = read_json(&p("sp/study.json"));
    assert_eq!(study["conditions"].as_array().unwrap().len(), 7);
    assert_eq!(study["conditions"][0], serde_json::json!({"kind": "sensor_percent", "value": 5.0}));
}

#[test]
fn unordered_study_axis_rejected_before_work() {
    let t = tempfile::tempdir().unwrap();
    let out = run(&["study-noise", "--data", s(&t.path().join("none")), "--model", "a=x", "--snr", "10,clean", "--out", s(&t.path().join("o"))]);
    assert!(!out.status.success());
    assert!(!t.path().join("o").exists());
}
