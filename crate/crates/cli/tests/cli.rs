//! End-to-end invocations of the `cgs` binary.

use std::path::Path;
use std::process::{Command, Output};

fn cgs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgs"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_writes_count_lines_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for out in [&a, &b] {
        let o = cgs(&["gen", "--problem", "gvi", "--ns", "20", "--na", "5", "--count", "10", "--seed", "0", "--out", path(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("config {"));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 10);
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
}

#[test]
fn gen_diffusion_targets_in_unit_interval() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.jsonl");
    let o = cgs(&["gen", "--problem", "diffusion", "--pores", "50", "--count", "5", "--out", path(&out)]);
    assert!(o.status.success());
    for line in std::fs::read_to_string(&out).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for t in v["node_target"].as_array().unwrap() {
            let t = t.as_f64().unwrap();
            assert!((0.0..=1.0).contains(&t));
        }
    }
}

#[test]
fn invalid_spec_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.jsonl");
    let o = cgs(&["gen", "--ns", "3", "--na", "4", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = cgs(&["train", "--gamma", "1.5", "--steps", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = cgs(&["train", "--phi", "sigmoid", "--steps", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = cgs(&["gen", "--problem", "nope", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_lists_flags_with_defaults() {
    let o = cgs(&["train", "--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in [
        "--problem", "--ns", "--na", "--alpha", "--pores", "--knn", "--seed", "--heads", "--layers", "--hidden",
        "--gamma", "--phi", "--solver-mode", "--tol", "--max-iter", "--steps", "--batch-size", "--lr",
        "--resample-every", "--threads", "--out", "--checkpoint",
    ] {
        assert!(text.contains(flag), "missing {flag}");
    }
    assert!(text.contains("[default: 0.5]"));
    assert!(text.contains("[default: 16]"));
    let o = cgs(&["eval", "--help"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("--dataset"));
    let o = cgs(&["gen", "--help"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("--count"));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    let ckpt = dir.path().join("m.ckpt");
    let data = dir.path().join("d.jsonl");
    let o = cgs(&[
        "train", "--problem", "gvi", "--ns", "8", "--na", "2", "--heads", "2", "--layers", "1", "--hidden", "8",
        "--steps", "3", "--batch-size", "4", "--eval-size", "4", "--eval-every", "3", "--out", path(&csv),
        "--checkpoint", path(&ckpt),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);
    assert!(cgs(&["gen", "--ns", "8", "--na", "2", "--count", "3", "--out", path(&data)]).status.success());
    let report = dir.path().join("r.csv");
    let run = || {
        let o = cgs(&["eval", "--checkpoint", path(&ckpt), "--dataset", path(&data), "--out", path(&report)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(&report).unwrap()
    };
    let first = run();
    assert_eq!(first.lines().count(), 2);
    assert_eq!(first, run());

    // diffusion instances carry two node features; the checkpoint expects one
    let diff = dir.path().join("diff.jsonl");
    assert!(cgs(&["gen", "--problem", "diffusion", "--pores", "12", "--count", "1", "--out", path(&diff)]).status.success());
    let o = cgs(&["eval", "--checkpoint", path(&ckpt), "--dataset", path(&diff)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_on_a_few_cases() {
    let o = cgs(&["gradcheck", "--count", "4", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("4 of 4 cases"));
}

#[test]
fn bench_single_size_gives_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b.csv");
    let o = cgs(&["bench", "--sizes", "100", "--repeats", "1", "--out", path(&out)]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "p,mode,median_s,repeats,status");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("100,direct,"));
    assert!(lines[2].starts_with("100,iterative,"));
}

#[test]
fn missing_dataset_is_runtime_error() {
    let o = cgs(&["eval", "--checkpoint", "/nonexistent/m.ckpt", "--dataset", "/nonexistent/d.jsonl"]);
    assert_eq!(o.status.code(), Some(3));
}
