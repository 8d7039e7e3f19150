use std::path::Path;
use std::process::{Command, Output};

use ltto::io::{load_pfm, read_json, Manifest};

fn ltto(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltto")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(p: &Path) -> Vec<String> {
    std::fs::read_to_string(p).unwrap().lines().map(String::from).collect()
}

/// A tiny model, enough to exercise the commands.
fn tiny_model(dir: &Path) -> String {
    let out = dir.join("pt");
    let o = ltto(&["pretrain", "--out", s(&out), "--epochs", "1", "--population", "4", "--validation", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.join("model.ltto").to_str().unwrap().to_string()
}

#[test]
fn generate_writes_requested_points() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("g");
    assert_eq!(code(&ltto(&["generate", "--out", s(&out), "--points", "5"])), 0);
    let csv = lines(&out.join("observations.csv"));
    assert_eq!(csv[0], "row,col,value");
    assert_eq!(csv.len(), 6);
    let depth = load_pfm(&out.join("depth.pfm")).unwrap();
    assert_eq!(depth.shape(), &[32, 32]);
    assert_eq!(load_pfm(&out.join("image.pfm")).unwrap().shape(), &[32, 32, 3]);
    let m: Manifest = read_json(&out.join("manifest.json")).unwrap();
    assert!(m.files.iter().any(|f| f.path == "config.json"));
}

#[test]
fn bad_arguments_exit_one() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("g");
    let o = ltto(&["generate", "--out", s(&out), "--kind", "tunnel"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("kind"));
    assert_eq!(code(&ltto(&["generate"])), 1);
    assert_eq!(code(&ltto(&["frobnicate"])), 1);
    let cfg = d.path().join("c.json");
    std::fs::write(&cfg, r#"{"unknown": 1}"#).unwrap();
    assert_eq!(code(&ltto(&["--config", s(&cfg), "generate", "--out", s(&out)])), 1);
}

#[test]
fn zero_iterations_give_header_only_trace() {
    let d = tempfile::tempdir().unwrap();
    let model = tiny_model(d.path());
    let out = d.path().join("a");
    assert_eq!(code(&ltto(&["adapt", "--out", s(&out), "--model", &model, "--iters", "0"])), 0);
    assert_eq!(lines(&out.join("trace.csv")), ["t,loss,a,b,fallback"]);
    assert!(out.join("aligned.pfm").is_file());
}

#[test]
fn adapt_trace_has_one_row_per_iteration() {
    let d = tempfile::tempdir().unwrap();
    let model = tiny_model(d.path());
    let out = d.path().join("a");
    assert_eq!(code(&ltto(&["adapt", "--out", s(&out), "--model", &model, "--iters", "7"])), 0);
    assert_eq!(lines(&out.join("trace.csv")).len(), 8);
    let missing = d.path().join("missing.ltto");
    assert_eq!(code(&ltto(&["adapt", "--out", s(&out), "--model", s(&missing)])), 1);
}

#[test]
fn analyze_without_a_run_fails() {
    let d = tempfile::tempdir().unwrap();
    let model = tiny_model(d.path());
    let empty = d.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = ltto(&["analyze", "--out", s(&d.path().join("an")), "--model", &model, "--trace", s(&empty)]);
    assert_ne!(code(&o), 0);
}

#[test]
fn verify_grid_filter_and_strict_failure() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("v");
    assert_eq!(code(&ltto(&["verify", "--out", s(&out), "--grid", "d=16 r=1", "--probe-scenes", "1"])), 0);
    assert_eq!(lines(&out.join("cells.csv")).len(), 2);
    let strict = d.path().join("v2");
    let o = ltto(&[
        "verify", "--out", s(&strict), "--grid", "d=16 r=1", "--eps", "0.1", "--strict", "--probe-scenes", "1",
    ]);
    assert_eq!(code(&o), 2);
    assert!(strict.join("verdict.json").is_file());
}
