use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;

fn conformal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conformal"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn conformal")
}

fn ok(args: &[&str]) -> String {
    let out = conformal(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr)
        .lines()
        .rfind(|l| l.starts_with("error: kind="))
        .unwrap_or_else(|| panic!("no error line in {:?}", String::from_utf8_lossy(&out.stderr)))
        .to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("cfg.json");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str = r#"{
    "methods": ["split", "madsplit", "jkplus", "jkplus_tuned"],
    "kernel": "knn:10",
    "tuning": {"n_scan": 4},
    "sizes": {"n_train": 150, "n_cal": 80, "n_test": 300},
    "n_reps": 2,
    "seed": 11,
    "write_splits": true
}"#;

#[test]
fn bench_smoke_single_rep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"methods": ["jkplus"], "sizes": {"n_train": 200, "n_cal": 100, "n_test": 300}, "n_reps": 1}"#,
    );
    let out = dir.path().join("out");
    let start = Instant::now();
    let stdout = ok(&["bench", "--config", &cfg, "--out", s(&out)]);
    assert!(start.elapsed().as_secs_f64() < 1.0, "took {:?}", start.elapsed());
    assert!(stdout.starts_with("jkplus"));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["methods"].as_array().unwrap().len(), 1);
    assert_eq!(report["methods"][0]["summary"]["reps"].as_array().unwrap().len(), 1);
    let table = fs::read_to_string(out.join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(out.join("state/jkplus_rep0.json").exists());
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"methods": ["jkplus"], "alpha": 0.2, "sizes": {"n_train": 100, "n_cal": 50, "n_test": 100}, "n_reps": 3}"#,
    );
    let out = dir.path().join("out");
    ok(&[
        "bench", "--config", &cfg, "--out", s(&out), "--alpha", "0.1", "--n-reps", "1", "--n-cal", "40",
        "--method", "split,jkplus", "--kernel", "rbf:0.1", "--seed", "5",
    ]);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let c = &report["config"];
    assert_eq!(c["alpha"], 0.1);
    assert_eq!(c["n_reps"], 1);
    assert_eq!(c["sizes"]["n_cal"], 40);
    assert_eq!(c["seed"], 5);
    assert_eq!(c["kernel"], "rbf:0.1");
    assert_eq!(c["methods"], serde_json::json!(["split", "jkplus"]));
}

#[test]
fn mi_prints_estimate_json() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    ok(&["synth", "--n", "2000", "--seed", "4", "--out", s(&data)]);
    let v: Value = serde_json::from_str(&ok(&["mi", "--input", s(&data), "--k", "3"])).unwrap();
    assert_eq!(v["k_neighbors"], 3);
    assert_eq!(v["n_samples"], 2000);
    assert_eq!(v["target"], "label");
    // y depends strongly on x through the sinusoidal mean.
    assert!(v["value"].as_f64().unwrap() > 0.3, "{v}");
    let b = &v["bound"];
    assert!(b["alpha_bar"].as_f64().unwrap() < b["alpha_bar_sqrt_mi"].as_f64().unwrap());
    assert!(v["bound_finite_n"]["alpha"].as_f64().unwrap() <= 0.05);
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let c = dir.path().join("c.csv");
    ok(&["synth", "--n", "500", "--seed", "9", "--out", s(&a)]);
    ok(&["synth", "--n", "500", "--seed", "9", "--out", s(&b)]);
    ok(&["synth", "--n", "500", "--seed", "10", "--out", s(&c)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    assert_eq!(fs::read_to_string(&a).unwrap().lines().next().unwrap(), "x0,y");
}

/// Calibrating and predicting in separate processes from the bench's split
/// files reproduces the bench's state documents and intervals exactly.
#[test]
fn calibrate_predict_matches_bench() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    ok(&["bench", "--config", &cfg, "--out", s(&out)]);
    let splits = out.join("splits");
    let sizes = fs::read_to_string(out.join("plots/size_vs_x.csv")).unwrap();

    for method in ["split", "madsplit", "jkplus", "jkplus_tuned"] {
        let state = dir.path().join(format!("{method}.json"));
        let cal = splits.join("rep0_cal.csv");
        let mut args = vec![
            "calibrate", "--input", s(&cal), "--method", method, "--config", &cfg,
            "--out", s(&state),
        ];
        let train = splits.join("rep0_train.csv");
        if method == "madsplit" {
            args.extend(["--train", s(&train)]);
        }
        ok(&args);
        assert_eq!(
            fs::read_to_string(&state).unwrap(),
            fs::read_to_string(out.join(format!("state/{method}_rep0.json"))).unwrap(),
            "{method} state differs"
        );

        let intervals = dir.path().join(format!("{method}_iv.csv"));
        ok(&[
            "predict", "--state", s(&state), "--input", s(&splits.join("rep0_test.csv")), "--out", s(&intervals),
        ]);
        let ours: Vec<(String, String)> = fs::read_to_string(&intervals)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[1].to_string(), f[2].to_string())
            })
            .collect();
        let bench: Vec<(String, String)> = sizes
            .lines()
            .filter(|l| l.split(',').next() == Some(method))
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[4].to_string(), f[5].to_string())
            })
            .collect();
        assert_eq!(ours.len(), 300);
        assert_eq!(ours, bench, "{method} intervals differ");

        let m: Value = serde_json::from_str(&ok(&["metrics", "--input", s(&intervals), "--state", s(&state)])).unwrap();
        let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        let rep0 = report["methods"]
            .as_array()
            .unwrap()
            .iter()
            .find(|r| r["method"] == method)
            .unwrap()["summary"]["reps"][0]
            .clone();
        assert_eq!(m, rep0, "{method} metrics differ");
    }
}

#[test]
fn predict_can_reprice_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    ok(&["bench", "--config", &cfg, "--out", s(&out), "--method", "jkplus", "--n-reps", "1"]);
    let state = out.join("state/jkplus_rep0.json");
    let test = out.join("splits/rep0_test.csv");
    let wide = dir.path().join("wide.csv");
    let narrow = dir.path().join("narrow.csv");
    ok(&["predict", "--state", s(&state), "--input", s(&test), "--out", s(&wide), "--alpha", "0.05"]);
    ok(&["predict", "--state", s(&state), "--input", s(&test), "--out", s(&narrow), "--alpha", "0.3"]);
    let hw = |p: &Path| -> Vec<f64> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
            .collect()
    };
    assert!(hw(&wide).iter().zip(hw(&narrow)).all(|(w, n)| *w >= n));
    assert!(hw(&wide).iter().zip(hw(&narrow)).any(|(w, n)| *w > n));
}

#[test]
fn tune_kernel_writes_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    ok(&["bench", "--config", &cfg, "--out", s(&out), "--method", "split", "--n-reps", "1"]);
    let tuned = dir.path().join("tuned");
    let summary: Value = serde_json::from_str(&ok(&[
        "tune-kernel", "--input", s(&out.join("splits/rep0_cal.csv")), "--config", &cfg, "--out", s(&tuned),
    ]))
    .unwrap();
    assert_eq!(summary["grid"].as_array().unwrap().len(), 4);
    assert_eq!(summary["n_points"], 80);
    let kernel: Value = serde_json::from_str(&fs::read_to_string(tuned.join("kernel.json")).unwrap()).unwrap();
    assert_eq!(kernel["per_point_scales"].as_array().unwrap().len(), 80);
    let csv = fs::read_to_string(tuned.join("mi_vs_scale.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "scale,mean_mi");
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = conformal(&["bench", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error: kind=usage msg="));

    let out = conformal(&["mi", "--input", "/nonexistent/data.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error: kind=missing_file msg="));

    let cfg = write_config(dir.path(), r#"{"n_reps": 0}"#);
    let out = conformal(&["bench", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error: kind=invalid_config msg="));

    let cfg = write_config(dir.path(), "{not json");
    let out = conformal(&["bench", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error: kind=invalid_config"));

    let out = conformal(&["calibrate", "--input", &cfg, "--out", "x.json", "--kernel", "gauss:1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = conformal(&["bench", "--alpha", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let out = conformal(&["bench", "--n-reps", "0", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error: kind=invalid_config"));
}

#[test]
fn runtime_errors_exit_1_with_parsable_line() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = dir.path().join("tiny.csv");
    fs::write(&tiny, "x0,y,pred\n0.1,1.0,0.9\n0.2,2.0,2.5\n").unwrap();
    let out = conformal(&["calibrate", "--input", s(&tiny), "--method", "jkplus", "--out", s(&dir.path().join("st.json"))]);
    assert_eq!(out.status.code(), Some(1));
    let line = error_line(&out);
    assert!(line.starts_with("error: kind=invalid_parameter msg=\""), "{line}");
    assert!(line.ends_with('"'));

    let nopred = dir.path().join("nopred.csv");
    fs::write(&nopred, "x0,y\n0.1,1.0\n0.2,2.0\n0.3,2.0\n").unwrap();
    let out = conformal(&["calibrate", "--input", s(&nopred), "--out", s(&dir.path().join("st.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_line(&out).starts_with("error: kind=schema"));
}

#[test]
fn help_and_version_exit_0() {
    assert!(conformal(&["--help"]).status.success());
    assert!(conformal(&["--version"]).status.success());
    assert!(conformal(&["bench", "--help"]).status.success());
}

#[test]
fn run_returns_codes_in_process() {
    assert_eq!(conformal_cli::run(["conformal", "nonsense"]), 2);
    assert_eq!(conformal_cli::run(["conformal", "metrics", "--input", "/missing.csv"]), 2);
}
