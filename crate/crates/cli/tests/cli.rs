use std::fs;
use std::process::{Command, Output};

fn selfheal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selfheal")).args(args).output().expect("run binary")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn check_passes() {
    let out = selfheal(&["check"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().all(|l| l.starts_with("[pass]")), "{text}");
}

#[test]
fn certify_reports_rate_as_csv() {
    let out = selfheal(&["certify", "--kappa", "10", "--sigma", "0.5", "--alpha", "0.1818181818"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "kappa,sigma,alpha,rho,lambda0,lambda1,cond_T,feasible");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let rho: f64 = row[3].parse().unwrap();
    assert!((rho - 0.9281).abs() < 2e-3, "{rho}");
    assert_eq!(row[7], "true");
}

#[test]
fn infeasible_certification_exits_one() {
    let out = selfheal(&["certify", "--kappa", "10", "--sigma", "0.8", "--alpha", "0.18"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains(",false"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(selfheal(&["certify", "--kappa", "10", "--sigma", "0.5"]).status.code(), Some(2));
    assert_eq!(selfheal(&["simulate", "/nonexistent/scenario.toml"]).status.code(), Some(2));
}

#[test]
fn sweep_writes_one_row_per_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("rates.csv");
    let out = selfheal(&["sweep", "--kappa", "10", "--sigmas", "0.2,0.7", "--out", csv.to_str().unwrap()]);
    assert!(out.status.success());
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("10.0,0.2,") && rows[0].ends_with(",true"));
    assert!(rows[1].ends_with(",false"));
}

#[test]
fn simulate_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("s.toml");
    fs::write(
        &scenario,
        r#"
algorithm = "alg1"
[topology]
kind = "ring_lattice"
n = 5
offsets = [1, 2]
weight = 0.3
[objective]
kind = "quadratic"
centers = [[1.0], [2.0], [3.0], [4.0], [5.0]]
[params]
alpha = 0.5
"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = selfheal(&["simulate", scenario.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--full-states"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("converged"));
    for f in ["trace.ndjson", "summary.csv", "report.json"] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    let first = fs::read_to_string(out_dir.join("trace.ndjson")).unwrap();
    assert!(first.lines().next().unwrap().contains("\"w1\""));
}
