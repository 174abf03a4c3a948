use std::path::Path;
use std::process::{Command, Output};

use crl_core::simulation::{RunConfig, TURN_DURATION};
use serde_json::Value;

fn crl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crl"))
        .args(args)
        .output()
        .expect("spawn crl")
}

fn stdout_ok(args: &[&str]) -> String {
    let out = crl(args);
    assert!(
        out.status.success(),
        "crl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Default configuration cut to a 12 s horizon.
fn short_config(dir: &Path) -> String {
    let mut cfg = RunConfig::paper_default();
    cfg.horizon = 12.0;
    for s in &mut cfg.swarm {
        s.turn_starts.retain(|&t| t + TURN_DURATION <= cfg.horizon);
    }
    let path = dir.join("short.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn flops_prints_table_values() {
    assert_eq!(
        stdout_ok(&["flops", "--scheme", "fcrl", "--filter", "mlvc", "--ni", "4", "--tm", "3"]).trim(),
        "121372"
    );
    assert_eq!(
        stdout_ok(&["flops", "--scheme", "ncrl", "--filter", "ekf", "--ni", "4"]).trim(),
        "3552"
    );
}

#[test]
fn simulate_reports_metrics_and_writes_trial_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let csv = dir.path().join("trial.csv");
    let text = stdout_ok(&[
        "simulate",
        "--config",
        &cfg,
        "--seed",
        "3",
        "--filter",
        "ekf",
        "--scheme",
        "hcrl",
        "--out",
        csv.to_str().unwrap(),
    ]);
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["method"], "hCRL");
    assert_eq!(v["seed"], 3);
    assert_eq!(v["steps"], 1200);
    assert!(v["failure"].is_null());
    let ss = v["metrics"]["ss_er_p"].as_f64().unwrap();
    assert!(ss.is_finite() && ss > 0.0);

    let body = std::fs::read_to_string(&csv).unwrap();
    assert!(body.starts_with("k,t,pair,psi_true,psi_est,x_true,x_est,y_true,y_est,z_true,z_est,fp_iters,step_time_ns"));
    // one row per step and neighbor
    assert_eq!(body.lines().count(), 1 + 1200 * 4);

    // same seed, same digest and metrics
    let again: Value = serde_json::from_str(&stdout_ok(&[
        "simulate", "--config", &cfg, "--seed", "3", "--filter", "ekf", "--scheme", "hcrl",
    ]))
    .unwrap();
    assert_eq!(again["config_digest"], v["config_digest"]);
    assert_eq!(again["metrics"], v["metrics"]);
}

#[test]
fn montecarlo_then_bootstrap_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let out = dir.path().join("run");
    let table = stdout_ok(&[
        "montecarlo",
        "--config",
        &cfg,
        "--q",
        "2",
        "--trials",
        "3",
        "--compare",
        "--resamples",
        "200",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(table.lines().count(), 1 + 15);
    for f in [
        "trials.json",
        "metrics.csv",
        "violin_data.csv",
        "bootstrap.csv",
        "iterations.csv",
        "timings.csv",
        "summary.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    assert_eq!(std::fs::read_dir(out.join("trials")).unwrap().count(), 45);

    let v: Value = serde_json::from_str(&stdout_ok(&[
        "bootstrap",
        "--in",
        out.to_str().unwrap(),
        "--a",
        "fCRL(MLVC)",
        "--b",
        "nCRL",
        "--resamples",
        "500",
    ]))
    .unwrap();
    assert_eq!(v["n_a"], 3);
    let p = v["result"]["p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));

    let again = dir.path().join("again");
    stdout_ok(&[
        "report",
        "--in",
        out.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
        "--resamples",
        "200",
    ]);
    assert_eq!(
        std::fs::read_to_string(out.join("metrics.csv")).unwrap(),
        std::fs::read_to_string(again.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read_to_string(out.join("bootstrap.csv")).unwrap(),
        std::fs::read_to_string(again.join("bootstrap.csv")).unwrap()
    );
}

#[test]
fn observability_csv_to_stdout() {
    let text = stdout_ok(&["observability", "--scheme", "fcrl", "--every", "500"]);
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,scheme,rank,full_rank,sigma_min,case_1,case_2,case_3,case_4"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r.split(',').nth(2) == Some("12")));
}

#[test]
fn bad_arguments_fail() {
    assert!(!crl(&["simulate", "--filter", "kalman"]).status.success());
    assert!(!crl(&["flops", "--scheme", "xcrl", "--filter", "ekf", "--ni", "2"])
        .status
        .success());
    let dir = tempfile::tempdir().unwrap();
    let out = crl(&[
        "report",
        "--in",
        dir.path().join("nothing").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
}
