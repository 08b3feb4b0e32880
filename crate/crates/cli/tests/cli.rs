use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use atlas_core::analytic::psi;
use atlas_core::quad::{integrate, QuadratureSpec};
use serde_json::Value;

fn lab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atlas-lab"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .env_remove("ATLAS_LAB_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = lab(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn manifest(dir: &Path, stem: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.manifest.json"))).unwrap()).unwrap()
}

fn rows(dir: &Path, file: &str) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(dir.join(file)).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

const SMALL: [&str; 8] = ["--epsilon", "1/16", "--grid-times", "0.25,0.5", "--replicas", "6", "--seed", "7"];

#[test]
fn simulate_is_deterministic_across_thread_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut args = vec!["simulate"];
    args.extend(SMALL);
    ok(a.path(), &args);
    let out = Command::new(env!("CARGO_BIN_EXE_atlas-lab"))
        .args(&args)
        .arg("--out-dir")
        .arg(b.path())
        .env("ATLAS_LAB_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    let csv_a = fs::read(a.path().join("simulate.csv")).unwrap();
    assert_eq!(csv_a, fs::read(b.path().join("simulate.csv")).unwrap());
    let text = String::from_utf8(csv_a).unwrap();
    assert!(text.starts_with("replica,t,x,observable,value\n"));
    assert!(!text.contains('\r'));
    let m = manifest(b.path(), "simulate");
    assert_eq!(m["config"]["threads"], 3);
    assert_eq!(m["config"]["gamma"], 1.0);
    assert_eq!(m["seed"], 7);
    assert!(m["notes"].as_array().unwrap().iter().any(|n| n.as_str().unwrap().contains("particle count")));
}

#[test]
fn simulate_rows_cover_grid_with_full_precision() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["simulate", "--delta", "0.01"];
    args.extend(SMALL);
    ok(dir.path(), &args);
    let rows = rows(dir.path(), "simulate.csv");
    // per replica and time: lowest, then field/count/smoothed at 2 points
    assert_eq!(rows.len(), 6 * 2 * 7);
    let value = &rows[1][4];
    let mantissa = value.trim_start_matches('-').split('e').next().unwrap();
    assert_eq!(mantissa.replace('.', "").len(), 17, "{value}");
    assert!(rows.iter().any(|r| r[3] == "smoothed"));
    assert_eq!(rows.last().unwrap()[0], "5");
}

#[test]
fn harris_model_switches_observables() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["simulate", "--model", "harris"];
    args.extend(SMALL);
    ok(dir.path(), &args);
    let rows = rows(dir.path(), "simulate.csv");
    assert!(rows.iter().any(|r| r[3] == "tagged"));
    assert!(!rows.iter().any(|r| r[3] == "lowest"));
    assert_eq!(manifest(dir.path(), "simulate")["config"]["model"], "harris");
}

#[test]
fn regenerating_from_the_written_config_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut args = vec!["simulate"];
    args.extend(SMALL);
    ok(a.path(), &args);
    let cfg = a.path().join("simulate.config");
    ok(b.path(), &["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(
        fs::read(a.path().join("simulate.csv")).unwrap(),
        fs::read(b.path().join("simulate.csv")).unwrap()
    );
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# local settings\ngamma = 2\nseed = 3\nreplicas = 2\nepsilon = 1/16\ngrid_times = 0.25\n").unwrap();
    ok(dir.path(), &["simulate", "--config", cfg.to_str().unwrap(), "--seed", "9"]);
    let m = manifest(dir.path(), "simulate");
    assert_eq!(m["config"]["gamma"], 2.0);
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config"]["dt"], 0.01);
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "gamma = 1\nreplica_count = 4\n").unwrap();
    let out = lab(dir.path(), &["simulate", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("replica_count"), "{err}");
}

fn cov_value(rows: &[Vec<String>], cell: [f64; 4], quantity: &str) -> (f64, f64) {
    let row = rows
        .iter()
        .find(|r| {
            r[4] == quantity && (0..4).all(|k| (r[k].parse::<f64>().unwrap() - cell[k]).abs() < 1e-12)
        })
        .unwrap_or_else(|| panic!("no {quantity} row for {cell:?}"));
    assert_eq!(row[7], "ok");
    (row[5].parse().unwrap(), row[6].parse().unwrap())
}

#[test]
fn covariance_table_anchors() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["covariance", "--grid-times", "0,1", "--grid-points", "0,1"]);
    let rows = rows(dir.path(), "covariance.csv");
    let (v, e) = cov_value(&rows, [1.0, 0.0, 1.0, 0.0], "cov_limit");
    assert!((v - 4.0 * (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-6);
    assert!(e < 1e-6);
    let (s, _) = cov_value(&rows, [1.0, 0.0, 1.0, 0.0], "sigma_profile");
    assert!((s - (2.0 / std::f64::consts::PI).powf(0.25)).abs() < 1e-6);
    // a time-0 cell only sees the initial profile
    let quad = QuadratureSpec::default();
    let direct = 2.0 * integrate(|y| psi(1.0, y, 0.0), 0.0, 1.0, &[], &quad).unwrap().value;
    let (v0, _) = cov_value(&rows, [0.0, 1.0, 1.0, 0.0], "cov_limit");
    assert!((v0 - direct).abs() < 1e-9, "{v0} vs {direct}");
    let (mg, _) = cov_value(&rows, [0.0, 1.0, 1.0, 0.0], "cov_mg");
    assert!(mg.abs() < 1e-12);
}

#[test]
fn sample_limit_reruns_identically_and_matches_variance() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["sample-limit", "--grid-times", "1", "--grid-points", "0", "--replicas", "100000", "--seed", "5"];
    ok(a.path(), &args);
    ok(b.path(), &args);
    let file_a = fs::read(a.path().join("sample_limit.csv")).unwrap();
    assert_eq!(file_a, fs::read(b.path().join("sample_limit.csv")).unwrap());
    let values: Vec<f64> = rows(a.path(), "sample_limit.csv").iter().map(|r| r[4].parse().unwrap()).collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let target = 4.0 * (2.0 / std::f64::consts::PI).sqrt();
    assert!((var - target).abs() < 3.0 * target * (2.0 / n).sqrt(), "{var}");
}

#[test]
fn fbm_draws_start_at_zero() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["sample-limit", "--hurst", "0.25", "--grid-times", "0,1,2", "--replicas", "20"]);
    let rows = rows(dir.path(), "sample_limit.csv");
    assert_eq!(rows.len(), 60);
    for r in rows.iter().filter(|r| r[1].parse::<f64>().unwrap() == 0.0) {
        assert_eq!(r[4].parse::<f64>().unwrap(), 0.0);
        assert_eq!(r[3], "fbm");
    }
}

#[test]
fn verify_reports_and_forced_failure_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["verify", "--checks", "C07"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("C07 PASS"));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["all_pass"], true);
    assert_eq!(report["checks"].as_array().unwrap().len(), 1);
    let failing = tempfile::tempdir().unwrap();
    let out = lab(failing.path(), &["verify", "--checks", "C07", "--perturb", "0.5"]);
    assert_eq!(out.status.code(), Some(1));
    let summary = ok(failing.path(), &["report"]);
    assert!(String::from_utf8_lossy(&summary.stdout).contains("C07 FAIL"));
}

#[test]
fn fast_tier_lists_each_check_once() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["verify", "--tier", "fast"]);
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    let ids: Vec<&str> = report["checks"].as_array().unwrap().iter().map(|c| c["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["C05", "C06", "C07", "C08"]);
    assert_eq!(report["all_pass"], true);
}

#[test]
fn unknown_check_id_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(dir.path(), &["verify", "--checks", "C99"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("C99"));
}
