use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn stepflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stepflow"))
        .current_dir(dir)
        .env_remove("STEPFLOW_OUTPUT_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn summary(out: &Output) -> Value {
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout.lines().last().expect("summary line");
    serde_json::from_str(line).expect("summary is JSON")
}

fn read_dir_sorted(path: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(path)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn non_monotone_profile_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = stepflow(dir.path(), &["ode-run", "--profile.A=1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let s = summary(&out);
    assert_eq!(s["status"], "error");
    assert!(s["message"]
        .as_str()
        .unwrap()
        .contains("profile not monotone"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("profile.A"));
}

#[test]
fn invalid_keys_and_values_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let out = stepflow(dir.path(), &["ode-run", "--ode.speed=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(summary(&out)["message"]
        .as_str()
        .unwrap()
        .contains("ode.speed"));
    let out = stepflow(dir.path(), &["pde-run", "--domain.M=100"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(summary(&out)["message"]
        .as_str()
        .unwrap()
        .contains("domain.M"));
}

#[test]
fn selftest_passes_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = stepflow(dir.path(), &["selftest"]);
    let s = summary(&out);
    assert_eq!(out.status.code(), Some(0), "{s}");
    assert_eq!(s["status"], "ok");
    let suites = s["suites"].as_array().unwrap();
    assert!(suites.len() >= 9);
    assert!(suites.iter().all(|v| v["passed"] == true));
}

#[test]
fn convergence_reports_a_slope() {
    let dir = tempfile::tempdir().unwrap();
    let out = stepflow(dir.path(), &["convergence", "--variant", "corrected"]);
    let s = summary(&out);
    assert_eq!(out.status.code(), Some(0), "{s}");
    let slope = s["slope"].as_f64().unwrap();
    assert!(slope.is_finite());
    assert_eq!(s["variant"], "corrected");
    let csv = fs::read_to_string(
        dir.path()
            .join("stepflow-output/run-convergence/convergence.csv"),
    )
    .unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("N,a,error"));
    assert_eq!(lines.count(), 4);
}

#[test]
fn runs_write_meta_and_are_byte_reproducible() {
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["ode-run", "--ode.N=16", "--ode.T=1e-4", "--output", "out"];
    for d in [&da, &db] {
        assert_eq!(stepflow(d.path(), &args).status.code(), Some(0));
    }
    let ra = read_dir_sorted(&da.path().join("out/run-ode-run"));
    let rb = read_dir_sorted(&db.path().join("out/run-ode-run"));
    let names: Vec<&str> = ra.iter().map(|f| f.0.as_str()).collect();
    assert_eq!(names, ["energy.csv", "meta.json", "trajectory.csv"]);
    assert_eq!(ra, rb);

    let meta: Value = serde_json::from_slice(&ra[1].1).unwrap();
    assert_eq!(meta["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(meta["config"]["ode.N"], "16");
    assert_eq!(meta["config"]["profile.A"], "0.2");

    let energy = String::from_utf8(ra[0].1.clone()).unwrap();
    assert!(energy.starts_with("t,E,dissipation,identity_residual\n"));
    let trajectory = String::from_utf8(ra[2].1.clone()).unwrap();
    let mut rows = trajectory.lines();
    assert_eq!(rows.next(), Some("t,index,value"));
    let first: Vec<&str> = rows.next().unwrap().split(',').collect();
    assert_eq!(first[0], "0.0000000000000000e0");
    assert_eq!(first[1], "1");
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("env-root");
    let out = Command::new(env!("CARGO_BIN_EXE_stepflow"))
        .current_dir(dir.path())
        .env("STEPFLOW_OUTPUT_DIR", &root)
        .args(["energy-report", "--output.prefix=probe"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let report: Value = serde_json::from_slice(
        &fs::read(root.join("probe-energy-report/energy_report.json")).unwrap(),
    )
    .unwrap();
    assert!((report["w"].as_f64().unwrap() - std::f64::consts::LN_2).abs() < 1e-6);
}

#[test]
fn config_file_is_read_and_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "# short run\node.N = 8\node.T = 1e-5\nprofile.A = 0.9\n",
    )
    .unwrap();
    let out = stepflow(
        dir.path(),
        &[
            "--config",
            cfg.to_str().unwrap(),
            "ode-run",
            "--profile.A=0.1",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    let meta: Value = serde_json::from_slice(
        &fs::read(dir.path().join("stepflow-output/run-ode-run/meta.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(meta["config"]["ode.N"], "8");
    assert_eq!(meta["config"]["profile.A"], "0.1");
}

#[test]
fn consistency_writes_long_format_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = stepflow(dir.path(), &["consistency", "--ode.N_sweep=32,64,128,256"]);
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(
        dir.path()
            .join("stepflow-output/run-consistency/consistency.csv"),
    )
    .unwrap();
    assert!(csv.starts_with("family,N,a,residual\n"));
    assert_eq!(csv.lines().count(), 1 + 12 * 4);
    let s = summary(&out);
    assert_eq!(s["orders"]["i2"]["kind"], "fitted");
}
