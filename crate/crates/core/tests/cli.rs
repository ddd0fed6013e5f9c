use std::path::{Path, PathBuf};
use std::process::Command;

use curvforge::cli::{run, Args, RunConfig, EXIT_CONFIG, EXIT_PASS};
use curvforge::convergence::{generate_synthetic, save_csv};
use curvforge::Dims;
use clap::Parser;
use serde_json::Value;

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("curvforge-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn run_to(args: &[&str], out: &Path, env_seed: Option<&str>) -> (i32, String) {
    let mut argv = vec!["curvforge"];
    argv.extend_from_slice(args);
    argv.push("--out");
    argv.push(out.to_str().unwrap());
    let code = run(argv, env_seed);
    (code, std::fs::read_to_string(out).unwrap_or_default())
}

fn json(text: &str) -> Value {
    serde_json::from_str(text).unwrap()
}

#[test]
fn help_and_bad_flags() {
    assert_eq!(run(["curvforge", "--help"], None), EXIT_PASS);
    assert_eq!(run(["curvforge", "--cmd", "nope"], None), EXIT_CONFIG);
    assert_eq!(run(["curvforge"], None), EXIT_CONFIG);
    assert_eq!(run(["curvforge", "--cmd", "verify", "--instances", "0"], None), EXIT_CONFIG);
    assert_eq!(run(["curvforge", "--cmd", "verify", "--L", "0"], None), EXIT_CONFIG);
    assert_eq!(run(["curvforge", "--cmd", "converge", "--radius", "-1"], None), EXIT_CONFIG);
}

#[test]
fn default_formats() {
    let cfg = |cmd: &str| RunConfig::from_args(Args::parse_from(["curvforge", "--cmd", cmd]), None).unwrap();
    assert_eq!(serde_json::to_value(cfg("converge").format).unwrap(), "csv");
    assert_eq!(serde_json::to_value(cfg("verify").format).unwrap(), "json");
    assert_eq!(serde_json::to_value(cfg("bounds").format).unwrap(), "json");
}

#[test]
fn env_seed_overrides_flag() {
    let args = || Args::parse_from(["curvforge", "--cmd", "verify", "--seed", "3"]);
    assert_eq!(RunConfig::from_args(args(), Some("11")).unwrap().seed, 11);
    assert_eq!(RunConfig::from_args(args(), None).unwrap().seed, 3);
    assert!(RunConfig::from_args(args(), Some("-4")).is_err());
    assert_eq!(run(["curvforge", "--cmd", "verify"], Some("x")), EXIT_CONFIG);
}

#[test]
fn verify_report_shape() {
    let (code, text) = run_to(&["--cmd", "verify", "--seed", "7", "--instances", "2"], &tmp("v.json"), None);
    assert_eq!(code, EXIT_PASS);
    let v = json(&text);
    assert_eq!(v["schema"], 1);
    assert_eq!(v["command"], "verify");
    assert_eq!(v["seed"], 7);
    assert_eq!(v["pass"], true);
    let recs = v["records"].as_array().unwrap();
    let names: Vec<(&str, u64)> = recs
        .iter()
        .map(|r| (r["name"].as_str().unwrap(), r["seed"].as_u64().unwrap()))
        .collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
    assert!(names.contains(&("hess_block_KQ", 8)));
    let (_, again) = run_to(&["--cmd", "verify", "--instances", "2"], &tmp("v2.json"), Some("7"));
    assert_eq!(text, again);
}

#[test]
fn degenerate_dims_exit_with_config_code() {
    let out = Command::new(env!("CARGO_BIN_EXE_curvforge"))
        .args(["--cmd", "verify", "--dv", "1", "--instances", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&out.stderr).contains("degenerate row"));
}

#[test]
fn bounds_report_has_every_block_pair() {
    let (_, text) = run_to(&["--cmd", "bounds", "--seed", "2", "--instances", "1"], &tmp("b.json"), None);
    let v = json(&text);
    let recs = v["records"].as_array().unwrap();
    let tr = recs.iter().filter(|r| r["name"].as_str().unwrap().starts_with("tr_block_")).count();
    assert_eq!(tr, 25);
    assert!(recs.iter().all(|r| r["inputs_digest"].as_str().unwrap().len() == 16));
    let (code, csv) = run_to(
        &["--cmd", "bounds", "--seed", "2", "--instances", "1", "--format", "csv"],
        &tmp("b.csv"),
        None,
    );
    assert!(code == 0 || code == 1);
    assert!(csv.starts_with("name,seed,lhs,rhs,slack,holds,inputs_digest\n"));
    assert_eq!(csv.lines().count(), recs.len() + 1);
}

#[test]
fn converge_attention_trace() {
    let (code, text) = run_to(&["--cmd", "converge", "--seed", "7", "--model", "attn"], &tmp("c.csv"), None);
    assert_eq!(code, EXIT_PASS, "{}", text.lines().next().unwrap_or(""));
    let mut lines = text.lines();
    let head = lines.next().unwrap();
    assert!(head.starts_with("# model=attn variant=appendix radius="));
    let r: f64 = head.split_whitespace().nth(3).unwrap()["radius=".len()..].parse().unwrap();
    assert!((r - 0.1).abs() < 1e-12);
    assert!(head.contains(" seed=7 k0=256 "));
    assert_eq!(lines.next(), Some("k,loss,delta,envelope,grad_norm,M,L_bar"));
    assert_eq!(lines.count(), 511);
}

#[test]
fn converge_from_csv_matches_synthetic() {
    let dims = Dims::small();
    let path = tmp("samples.csv");
    save_csv(&path, &generate_synthetic(dims, 128, 5, 1.0).unwrap(), dims).unwrap();
    let common = ["--cmd", "converge", "--seed", "5", "--model", "attn"];
    let (c1, a) = run_to(&[&common[..], &["--data", "synthetic:128"]].concat(), &tmp("s.csv"), None);
    let (c2, b) = run_to(&[&common[..], &["--data", path.to_str().unwrap()]].concat(), &tmp("f.csv"), None);
    assert_eq!(c1, c2);
    assert_eq!(a, b);
}

#[test]
fn malformed_csv_exits_with_config_code() {
    let path = tmp("bad.csv");
    std::fs::write(&path, "# dims L=3 dV=4\n1,2,3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_curvforge"))
        .args(["--cmd", "converge", "--model", "attn", "--data"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    let missing = run(["curvforge", "--cmd", "converge", "--data", "/nonexistent/x.csv"], None);
    assert_eq!(missing, EXIT_CONFIG);
}

#[test]
fn maintext_variant_is_recorded() {
    let (_, text) = run_to(
        &["--cmd", "converge", "--model", "attn", "--data", "synthetic:64", "--bound-variant", "maintext"],
        &tmp("m.csv"),
        None,
    );
    assert!(text.lines().next().unwrap().contains("variant=maintext"));
    let (_, j) = run_to(
        &["--cmd", "converge", "--model", "attn", "--data", "synthetic:64", "--format", "json"],
        &tmp("m.json"),
        None,
    );
    let v = json(&j);
    assert_eq!(v["bound_variant"], "appendix");
    assert_eq!(v["records"].as_array().unwrap().len(), 63);
    assert!(v["wstar"]["grad_norm"].as_f64().unwrap() <= 1e-4);
}

#[test]
fn selftest_runs() {
    let (code, text) = run_to(&["--cmd", "selftest", "--instances", "2"], &tmp("st.json"), None);
    assert!(code == 0 || code == 1);
    let v = json(&text);
    assert_eq!(v["records"].as_array().unwrap().len(), 3);
}
