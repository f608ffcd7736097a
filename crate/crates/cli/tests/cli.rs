use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latent-brrr"))
        .args(args)
        .env("LATENT_BRRR_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn simulate(dir: &Path, seed: &str) {
    ok(&[
        "simulate", "--n-train", "60", "--n-test", "40", "--p", "6", "--k", "8", "--rank", "2", "--seed", seed,
        "--out-dir", &dir.display().to_string(),
    ]);
}

const QUICK: [&str; 6] = ["--iterations", "60", "--burn-in", "30", "--thin", "3"];

fn status(dir: &Path) -> String {
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    m["status"].as_str().unwrap().to_string()
}

#[test]
fn out_of_range_alpha_exits_2() {
    let t = TempDir::new().unwrap();
    let out = bin(&["simulate", "--alpha", "1.5", "--out-dir", &p(t.path(), "o")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
}

#[test]
fn missing_input_names_path() {
    let t = TempDir::new().unwrap();
    simulate(t.path(), "1");
    let missing = p(t.path(), "absent.csv");
    let out = bin(&["fit", "--x", &p(t.path(), "X_train.csv"), "--y", &missing, "--out-dir", &p(t.path(), "o")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&missing));
}

#[test]
fn non_finite_cell_names_row_and_column() {
    let t = TempDir::new().unwrap();
    simulate(t.path(), "1");
    let y = t.path().join("Y_train.csv");
    let text = fs::read_to_string(&y).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut cells: Vec<&str> = lines[3].split(',').collect();
    cells[2] = "NaN";
    lines[3] = cells.join(",");
    fs::write(&y, lines.join("\n") + "\n").unwrap();
    let out = bin(&["fit", "--x", &p(t.path(), "X_train.csv"), "--y", &y.display().to_string(), "--out-dir", &p(t.path(), "o")]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(err.contains("row") && err.contains("column"), "{err}");
}

#[test]
fn fit_then_predict_scores_test_set() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    simulate(d, "2");
    let fit_dir = p(d, "fit");
    let (x, y) = (p(d, "X_train.csv"), p(d, "Y_train.csv"));
    let mut args = vec!["fit", "--x", &x, "--y", &y, "--rank", "2", "--samples", "--out-dir", &fit_dir];
    args.extend(QUICK);
    ok(&args);
    assert_eq!(status(Path::new(&fit_dir)), "ok");
    assert!(Path::new(&fit_dir).join("samples.bin").exists());
    let pred_dir = p(d, "pred");
    ok(&[
        "predict", "--summary", &p(Path::new(&fit_dir), "posterior_summary.json"), "--x", &p(d, "X_test.csv"), "--y",
        &p(d, "Y_test.csv"), "--out-dir", &pred_dir,
    ]);
    let pred = fs::read_to_string(Path::new(&pred_dir).join("Y_pred.csv")).unwrap();
    assert_eq!(pred.lines().count(), 41);
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(Path::new(&pred_dir).join("eval.json")).unwrap()).unwrap();
    assert!(eval["comparison"]["null"]["mse_total"].as_f64().unwrap() > 0.0);
}

#[test]
fn failed_run_leaves_failed_manifest() {
    let t = TempDir::new().unwrap();
    simulate(t.path(), "3");
    let out_dir = t.path().join("o");
    // Only 40 test rows against a 60-row training X: shapes disagree.
    let out = bin(&[
        "fit", "--x", &p(t.path(), "X_train.csv"), "--y", &p(t.path(), "Y_test.csv"), "--out-dir",
        &out_dir.display().to_string(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(status(&out_dir), "failed");
}

#[test]
fn cv_writes_table_and_best_config() {
    let t = TempDir::new().unwrap();
    simulate(t.path(), "4");
    let o = p(t.path(), "cv");
    let mut args = vec![
        "cv".to_string(), "--x".into(), p(t.path(), "X_train.csv"), "--y".into(), p(t.path(), "Y_train.csv"),
        "--rank-grid".into(), "1,2".into(), "--beta-grid".into(), "0.1,0.2".into(), "--folds".into(), "3".into(),
        "--out-dir".into(), o.clone(),
    ];
    args.extend(QUICK.map(String::from));
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let table = fs::read_to_string(Path::new(&o).join("score_table.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(table.starts_with("beta,rank,cv_mse,fold_0,fold_1,fold_2,failure"));
    let best: serde_json::Value = serde_json::from_str(&fs::read_to_string(Path::new(&o).join("best_config.json")).unwrap()).unwrap();
    assert!([1, 2].contains(&best["rank"].as_u64().unwrap()));
}

#[test]
fn verify_reports_checks_and_exits_0() {
    let t = TempDir::new().unwrap();
    let o = p(t.path(), "v");
    let out = ok(&[
        "verify", "--prop2", "--marginal", "--prop2-draws", "50000", "--marginal-draws", "5000", "--out-dir", &o,
    ]);
    assert_eq!(out.lines().filter(|l| l.starts_with("truncation deficit")).count(), 3);
    let props: serde_json::Value = serde_json::from_str(&fs::read_to_string(Path::new(&o).join("propositions.json")).unwrap()).unwrap();
    assert!(props["prop1"].is_null());
    assert_eq!(props["prop2"].as_array().unwrap().len(), 3);
}
