use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rso_bench::sweep::AGGREGATE_HEADER;
use rso_core::engine::CSV_HEADER;

fn bin(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rso-bench"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name).to_string_lossy().into_owned()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn keys(v: &serde_json::Value) -> Vec<String> {
    let mut k: Vec<String> = v.as_object().expect("object").keys().cloned().collect();
    k.sort();
    k
}

#[test]
fn trace_and_summary_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["train", &config("quadratic_rso.toml")], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("quadratic-rso.trace.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("k,f,grad_sq_norm,eps_cert,inner_steps,comm_bytes,opt_state_entries"));
    assert_eq!(CSV_HEADER, csv.lines().next().unwrap());
    assert_eq!(csv.lines().count(), 1 + 51);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("quadratic-rso.summary.json")).unwrap()).unwrap();
    assert_eq!(
        keys(&summary),
        [
            "aborted",
            "algorithm",
            "final_loss",
            "initial_loss",
            "max_telescoping_residual",
            "mean_grad_sq_norm",
            "name",
            "opt_state_entries",
            "precision",
            "rank",
            "seed",
            "svd_fallbacks",
            "total_comm_bytes",
            "total_steps",
            "uncertified_solves"
        ]
    );
    assert_eq!(summary["algorithm"], "rso");
    assert_eq!(summary["uncertified_solves"], 0);
}

#[test]
fn sweep_aggregate_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["sweep", &config("quadratic_sweep.toml"), "--jobs", "2"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let agg = std::fs::read_to_string(dir.path().join("quadratic-sweep.sweep.csv")).unwrap();
    let lines: Vec<&str> = agg.lines().collect();
    assert_eq!(lines[0], AGGREGATE_HEADER);
    assert_eq!(lines.len(), 1 + 4 * 3);
    assert!(lines[1].starts_with("quadratic-sweep-s0-r2,rso,0,2,"));
    assert!(lines[12].starts_with("quadratic-sweep-s3-r32,rso,3,32,"));
    assert!(dir.path().join("quadratic-sweep-s1-r8.trace.csv").exists());
}

#[test]
fn verify_report_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["verify", "gradcheck"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "verify gradcheck: pass");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("verify-gradcheck.json")).unwrap()).unwrap();
    assert_eq!(keys(&report), ["check", "first_failure", "items", "pass"]);
    assert_eq!(keys(&report["items"][0]), ["asserted", "label", "pass", "threshold", "value"]);
}

#[test]
fn memory_report_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["memory-report", "--arch", "1B", "--alg", "galore", "--rank", "512"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(keys(&report), ["activation_bytes", "alg", "arch", "breakdown", "comm_bytes", "optimizer_state_bytes", "rank"]);
    assert_eq!(report["arch"], "1B");
    assert_eq!(report["rank"], 512);
}

#[test]
fn failed_check_exits_one() {
    // Rank-one Monte-Carlo error is about √(m/trials), far above tolerance.
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["verify", "projections", "--m", "64", "--r", "1", "--trials", "100"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    assert!(dir.path().join("verify-projections.json").exists());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bin(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(bin(&["memory-report", "--arch", "3B", "--alg", "rso"], dir.path()).status.code(), Some(2));
    assert_eq!(bin(&["memory-report", "--arch", "60M", "--alg", "sgd"], dir.path()).status.code(), Some(2));
    let bad = write_config(dir.path(), "name = \"x\"\n[problem]\nkind = \"quadratic\"\nshapes = [[8, 4]]\nbogus = 1\n[optimizer]\nkind = \"rso\"\n");
    assert_eq!(bin(&["train", bad.to_str().unwrap()], dir.path()).status.code(), Some(2));
    let missing = dir.path().join("absent.toml");
    assert_eq!(bin(&["train", missing.to_str().unwrap()], dir.path()).status.code(), Some(2));
    let rank = write_config(dir.path(), "name = \"x\"\n[problem]\nkind = \"quadratic\"\nshapes = [[8, 4]]\n[optimizer]\nkind = \"rso\"\nranks = [9]\n");
    assert_eq!(bin(&["train", rank.to_str().unwrap()], dir.path()).status.code(), Some(2));
}

#[test]
fn divergence_exits_three_and_keeps_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "name = \"boom\"\n[problem]\nkind = \"quadratic\"\nshapes = [[8, 4]]\n[optimizer]\nkind = \"rso\"\nranks = [2]\neta = 1e300\nouter_iters = 20\n[optimizer.solver]\nkind = \"gd\"\nlr = 1e300\n",
    );
    let out = bin(&["train", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("boom.summary.json")).unwrap()).unwrap();
    assert!(summary["aborted"].is_string());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        assert!(bin(&["train", &config("logistic_zo.toml")], dir).status.success());
    }
    for f in ["logistic-zo.trace.csv", "logistic-zo.summary.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}
