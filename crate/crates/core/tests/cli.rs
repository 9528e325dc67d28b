use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_loopgas"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn loopgas")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn chain() -> String {
    configs().join("chain_d1.json").to_string_lossy().into_owned()
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    let mut rd = csv::Reader::from_path(p).unwrap();
    rd.records().map(|r| r.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn diagnostics_at_zero_fugacity() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["--config", &chain(), "--set", "model.z=0", "--out", path_str(dir.path()), "diagnostics"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("diagnostics.json")).unwrap()).unwrap();
    assert_eq!(v["q"].as_f64(), Some(0.0));
    assert!(dir.path().join("run.json").exists());
}

#[test]
fn ed_two_site_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["--config", &chain(), "--out", path_str(dir.path()), "lnz", "--method", "ed", "--R", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let rows = csv_rows(&dir.path().join("lnz.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "ed");
    assert_eq!(rows[0][2], "2");
    let lnz: f64 = rows[0][6].parse().unwrap();
    assert!((lnz - 2.485_893_875_030_35e-2).abs() < 1e-14);
}

#[test]
fn fit_recovers_synthetic_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let mut text = String::from("R,lnZ,err\n");
    for r in 2..=8 {
        let r = r as f64;
        text += &format!("{r},{},1e-6\n", 0.3 * r - 0.1);
    }
    fs::write(&data, text).unwrap();
    let out = run(&["--config", &chain(), "--out", path_str(dir.path()), "fit", "--data", path_str(&data)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&dir.path().join("fit.csv"));
    let vals: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(vals.len(), 2);
    assert!((vals[0] - 0.3).abs() < 1e-9, "{rows:?}");
    // two end faces share the constant
    assert!((vals[1] + 0.05).abs() < 1e-9, "{rows:?}");
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["--config", &chain(), "--set", "model.colour=3", "--out", path_str(dir.path()), "norms"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn bad_flag_and_missing_config() {
    assert_eq!(run(&["norms", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["norms"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn strict_mode_turns_failures_into_exit_two() {
    // M = 0.25, j = 1: the n = 0 term alone exceeds the half prefactor
    let dir = tempfile::tempdir().unwrap();
    let d = path_str(dir.path());
    let pi = r#"model.pi=[{"vector":[1],"value":[-0.25,0.0]}]"#;
    let args = ["--config", &chain(), "--set", pi, "--set", "checks.j=[1]", "--out", d];
    let lax = run(&[&args[..], &["check", "bounds", "--only", "lemma1"]].concat());
    assert_eq!(lax.status.code(), Some(0), "{}", String::from_utf8_lossy(&lax.stderr));
    let rows = csv_rows(&dir.path().join("checks.csv"));
    assert!(rows.iter().any(|r| r[8] == "false"));
    let strict = run(&[&args[..], &["--strict", "check", "bounds", "--only", "lemma1"]].concat());
    assert_eq!(strict.status.code(), Some(2));
}

#[test]
fn replay_reproduces_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out = run(&[
        "--config", &chain(), "--set", "truncation.samples=500", "--out", path_str(a.path()),
        "lnz", "--method", "cluster",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let manifest = a.path().join("run.json");
    let m: serde_json::Value = serde_json::from_slice(&fs::read(&manifest).unwrap()).unwrap();
    assert_eq!(m["config"]["truncation"]["samples"], 500);
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(m["outputs"][0], "lnz.csv");
    let out = run(&["--out", path_str(b.path()), "replay", path_str(&manifest)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(a.path().join("lnz.csv")).unwrap(), fs::read(b.path().join("lnz.csv")).unwrap());
}

#[test]
fn thread_count_does_not_change_results() {
    let mut csvs = Vec::new();
    for t in ["1", "8"] {
        let dir = tempfile::tempdir().unwrap();
        let out = run(&[
            "--config", &chain(), "--set", "truncation.samples=800", "--threads", t,
            "--out", path_str(dir.path()), "lnz", "--method", "direct",
        ]);
        assert_eq!(out.status.code(), Some(0));
        csvs.push(fs::read(dir.path().join("lnz.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn coeffs_order_above_dimension_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["--config", &chain(), "--out", path_str(dir.path()), "coeffs", "--order", "2"]);
    assert_eq!(out.status.code(), Some(1));
}
