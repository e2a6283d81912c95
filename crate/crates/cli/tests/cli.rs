use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CANONICAL: &str = r#"{"mu":1,"sigma":1,"r":0.5,"c_plus":1.1,"c_minus":0.9,"k_plus":0.2353,"k_minus":0.1}"#;
const REFUND_ONLY: &str = r#"{"mu":1,"sigma":1,"r":0.5,"c_plus":1.1,"c_minus":0.9,"k_plus":0.9,"k_minus":0.1}"#;

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mutual-band-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn params(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("params.json");
    fs::write(&path, body).unwrap();
    path
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mutual-band"))
        .arg("--out-dir")
        .arg(dir.join("out"))
        .args(args)
        .env("MUTUAL_BAND_THREADS", "2")
        .output()
        .unwrap()
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn solve_refund_only_params() {
    let dir = workdir("solve");
    let p = params(&dir, REFUND_ONLY);
    let out = run(&dir, &["solve", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = json(dir.join("out/policy.json"));
    assert_eq!(doc["regime"], "DividendOnly");
    assert_eq!(doc["A"], 0.0);
    assert!(doc["K_plus_bar"].as_f64().unwrap() < 0.9);
    let manifest = json(dir.join("out/solve_manifest.json"));
    assert_eq!(manifest["command"], "solve");
    assert!(manifest["outputs"][0].as_str().unwrap().ends_with("policy.json"));
}

#[test]
fn verify_passes_on_canonical_params() {
    let dir = workdir("verify");
    let p = params(&dir, CANONICAL);
    let out = run(&dir, &["verify", p.to_str().unwrap(), "--grid", "2000", "--tol", "1e-6"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(dir.join("out/qvi_report.json"))["pass"], true);
    let rows = fs::read_to_string(dir.join("out/qvi_points.csv")).unwrap();
    assert!(rows.lines().count() > 2000);
}

#[test]
fn sweep_has_single_transition_at_threshold() {
    let dir = workdir("sweep");
    let p = params(&dir, CANONICAL);
    let out = run(&dir, &["solve", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let kb = json(dir.join("out/policy.json"))["K_plus_bar"].as_f64().unwrap();
    let out = run(&dir, &["sweep", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.join("out/sweep.csv")).unwrap();
    let rows: Vec<(f64, String)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].to_string())
        })
        .collect();
    assert_eq!(rows.len(), 201);
    let switches: Vec<usize> = (0..rows.len() - 1).filter(|&i| rows[i].1 != rows[i + 1].1).collect();
    assert_eq!(switches.len(), 1);
    let i = switches[0];
    assert_eq!(rows[i].1, "BandFull");
    let step = rows[1].0 - rows[0].0;
    assert!((rows[i].0 - kb).abs() <= step && (rows[i + 1].0 - kb).abs() <= step);
}

#[test]
fn table_has_requested_columns() {
    let dir = workdir("table");
    let p = params(&dir, CANONICAL);
    let out = run(&dir, &["table", p.to_str().unwrap(), "--from", "0", "--to", "1", "--step", "0.25"]);
    assert_eq!(out.status.code(), Some(0));
    let text = fs::read_to_string(dir.join("out/table.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x,V,Vp,Vpp,u");
    assert_eq!(lines.len(), 6);
}

#[test]
fn simulate_is_reproducible() {
    let dir = workdir("simulate");
    let p = params(&dir, CANONICAL);
    let args = ["simulate", p.to_str().unwrap(), "--x", "0.6", "--paths", "64", "--dt", "1e-3", "--seed", "7", "--log"];
    assert_eq!(run(&dir, &args).status.code(), Some(0));
    let first = fs::read(dir.join("out/sim_result.json")).unwrap();
    let log = fs::read(dir.join("out/interventions.csv")).unwrap();
    assert_eq!(run(&dir, &args).status.code(), Some(0));
    assert_eq!(first, fs::read(dir.join("out/sim_result.json")).unwrap());
    assert_eq!(log, fs::read(dir.join("out/interventions.csv")).unwrap());
    let doc = json(dir.join("out/sim_result.json"));
    assert_eq!(doc["result"]["ruin_fraction"], 0.0);
    assert!(String::from_utf8(log).unwrap().starts_with("path,time,xi,discounted_cost_term\n"));
}

#[test]
fn fd_writes_report() {
    let dir = workdir("fd");
    let p = params(&dir, CANONICAL);
    let out = run(&dir, &["fd", p.to_str().unwrap(), "--h", "5e-3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rep = json(dir.join("out/fd_report.json"));
    assert!(rep["sup_error_band"].as_f64().unwrap() < 2e-2);
    let out = run(&dir, &["fd", p.to_str().unwrap(), "--xmax", "1.0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_two() {
    let dir = workdir("usage");
    assert_eq!(run(&dir, &["verify"]).status.code(), Some(2));
    assert_eq!(run(&dir, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&dir, &["solve", "/nonexistent/params.json"]).status.code(), Some(2));
    let bad = params(&dir, r#"{"mu":1,"sigma":1,"r":0.5,"c_plus":0.9,"c_minus":0.9,"k_plus":0.3,"k_minus":0.1}"#);
    let out = run(&dir, &["solve", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("c_plus"));
}

#[test]
fn failed_verification_exits_one() {
    let dir = workdir("verify-fail");
    let p = params(&dir, CANONICAL);
    let out = run(&dir, &["verify", p.to_str().unwrap(), "--tol", "1e-300"]);
    assert_eq!(out.status.code(), Some(1));
}
