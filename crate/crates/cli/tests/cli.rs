use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TRACE_HEADER: &str = "k,L,r,v_norm,grad_norm,dtheta_norm,eta_eff,t_us";

fn energia(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_energia")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn converged_run_exits_zero_with_the_trace_header() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("t.csv");
    let o = energia(&["run", "--problem", "quad", "--eta", "0.05", "--eps-feas", "0.25", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = read(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(TRACE_HEADER));
    let last = text.lines().last().unwrap();
    let loss: f64 = last.split(',').nth(1).unwrap().parse().unwrap();
    assert!((loss - 0.25).abs() < 1e-7);
}

#[test]
fn zero_budget_gives_an_empty_body_and_exit_two() {
    let o = energia(&["run", "--problem", "quad", "--eta", "0.05", "--max-iter", "0"]);
    assert_eq!(code(&o), 2);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), format!("{TRACE_HEADER}\n"));
}

#[test]
fn exhausted_budget_exits_two() {
    let o = energia(&["run", "--problem", "rosen", "--alpha", "100", "--eta", "0.001", "--max-iter", "5"]);
    assert_eq!(code(&o), 2);
    // one row per iteration taken
    let text = String::from_utf8(o.stdout).unwrap();
    let ks: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ks, ["0", "1", "2", "3", "4"]);
}

#[test]
fn infeasible_fixed_step_exits_three() {
    let o = energia(&["run", "--problem", "rosen", "--alpha", "10000", "--method", "hrgd", "--eta", "0.001"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn configuration_errors_exit_one() {
    for args in [
        vec!["run", "--problem", "quad", "--method", "fw"],
        vec!["run", "--problem", "quad", "--eta", "-1"],
        vec!["run", "--problem", "cube"],
        vec!["run"],
        vec!["run", "--config", "/nonexistent/config.json"],
        vec!["bench", "table9"],
        vec!["verify", "--suite", "nothing"],
        vec!["frobnicate"],
    ] {
        let o = energia(&args);
        assert_eq!(code(&o), 1, "{args:?}");
    }
    assert_eq!(code(&energia(&["--help"])), 0);
}

#[test]
fn identical_runs_write_identical_bytes() {
    let dir = TempDir::new().unwrap();
    let paths: Vec<_> = ["a.csv", "b.csv"].iter().map(|f| dir.path().join(f)).collect();
    for p in &paths {
        let o = energia(&["run", "--problem", "doptimal", "--m", "4", "--n", "25", "--seed", "5", "--method", "aepg", "--eta", "1", "--max-iter", "400", "--out", p.to_str().unwrap()]);
        assert!(matches!(code(&o), 0 | 2));
    }
    assert_eq!(std::fs::read(&paths[0]).unwrap(), std::fs::read(&paths[1]).unwrap());
}

#[test]
fn json_config_and_flag_overrides() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"version": 1, "problem": "quad", "method": "aepg", "alpha": 10, "eta": 0.05, "eps_feas": 0.25, "format": "json"}"#).unwrap();
    let o = energia(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["status"], "converged");

    let o = energia(&["run", "--config", cfg.to_str().unwrap(), "--max-iter", "3", "--format", "csv"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8(o.stdout).unwrap().starts_with(TRACE_HEADER));

    std::fs::write(&cfg, r#"{"version": 1, "problem": "quad", "method": "aepg", "colour": "red"}"#).unwrap();
    assert_eq!(code(&energia(&["run", "--config", cfg.to_str().unwrap()])), 1);
}

#[test]
fn report_rows_are_appended_under_one_header() {
    let dir = TempDir::new().unwrap();
    let rep = dir.path().join("report.csv");
    for max_iter in ["0", "10"] {
        let o = energia(&["run", "--problem", "quad", "--eta", "0.05", "--max-iter", max_iter, "--report", rep.to_str().unwrap()]);
        assert_eq!(code(&o), 2);
    }
    let text = read(&rep);
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("problem,method,"));
    assert!(lines[2].contains(",budget_exhausted,10,"));
}

#[test]
fn generated_data_drives_a_run() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("u.csv");
    let o = energia(&["gen-data", "--m", "3", "--n", "12", "--seed", "8", "--out", data.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = read(&data);
    assert_eq!(text.lines().next(), Some("u1,u2,u3"));
    assert_eq!(text.lines().count(), 13);

    let mut traces = Vec::new();
    for extra in [vec!["--data", data.to_str().unwrap()], vec!["--m", "3", "--n", "12", "--seed", "8"]] {
        let mut args = vec!["run", "--problem", "doptimal", "--method", "fw_away", "--max-iter", "200"];
        args.extend(extra);
        let o = energia(&args);
        assert!(matches!(code(&o), 0 | 2), "{}", String::from_utf8_lossy(&o.stderr));
        traces.push(o.stdout);
    }
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn verify_reports_each_check() {
    let o = energia(&["verify", "--suite", "pl_example,projections"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().count() >= 3);
    assert!(text.contains("pl_example") && text.contains("projections"));
}
