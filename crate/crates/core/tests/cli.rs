use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_momentcert"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json_of(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn extract_quarter_form() {
    let m = fixture("elprimero.json");
    let out = run(&["extract", path_str(&m), "--tol-rank", "1e-9", "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json_of(&out);
    assert_eq!(v["status"], "GaussianRuleFound");
    assert_eq!(v["hankel_status"], "HankelNotFlat");
    let nodes = v["rule"]["nodes"].as_array().unwrap();
    assert_eq!(nodes.len(), 3);
    let weights: Vec<f64> = v["rule"]["weights"]
        .as_array()
        .unwrap()
        .iter()
        .map(|w| w.as_f64().unwrap())
        .collect();
    assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn bound_report() {
    let m = fixture("madrugada.json");
    let out = run(&["bound", path_str(&m), "--tol-rank", "1e-9", "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json_of(&out);
    assert_eq!(v["dim_T"], 10);
    assert_eq!(v["max_commutator_rank"], 4);
    assert_eq!(v["moller_bound"], 12);
}

#[test]
fn not_hankel_is_inconclusive() {
    let m = fixture("madrugada.json");
    let out = run(&["extract", path_str(&m), "--tol-rank", "1e-9", "--tol-hankel", "1e-9"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("status: Inconclusive"));
}

#[test]
fn solve_certifies_and_is_deterministic() {
    let p = fixture("problems/porfavor.json");
    let first = run(&["solve", path_str(&p), "--json"]);
    assert_eq!(
        first.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let v = json_of(&first);
    assert_eq!(v["status"], "OptimalCertified");
    assert_eq!(v["certified_order"], 4);
    assert!((v["value"].as_f64().unwrap() + 16.7389).abs() < 1e-2);
    let second = run(&["solve", path_str(&p), "--json"]);
    assert_eq!(first.stdout, second.stdout);
}

#[test]
fn extract_with_problem_certifies() {
    let m = fixture("porfavor_m.json");
    let p = fixture("problems/porfavor.json");
    let out = run(&[
        "extract",
        path_str(&m),
        "--constraints",
        path_str(&p),
        "--tol-rank",
        "1e-3",
        "--tol-hankel",
        "1e-3",
        "--tol-feas",
        "1e-3",
        "--json",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json_of(&out)["status"], "OptimalCertified");
}

#[test]
fn relax_prints_moments() {
    let p = fixture("problems/shifted_square.json");
    let out = run(&["relax", path_str(&p), "--order", "2", "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json_of(&out);
    assert_eq!(v["status"], "Optimal");
    let moments = v["moments"].as_array().unwrap();
    assert_eq!(moments.len(), 3);
    assert!((moments[1]["value"].as_f64().unwrap() - 1.0).abs() < 1e-3);
}

#[test]
fn unbounded_problem_exits_two() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    write!(
        f,
        r#"{{"variables": 1, "objective": [{{"exponents": [3], "coeff": 1.0}}]}}"#
    )
    .unwrap();
    let out = run(&["solve", path_str(f.path()), "--max-order", "4"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_input_exits_one() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    write!(f, r#"{{"n": 1, "order": 1, "entries": [[1.0, 0.5], [0.5]]}}"#).unwrap();
    let out = run(&["extract", path_str(f.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    let out = run(&["solve", "/nonexistent/problem.json"]);
    assert_eq!(out.status.code(), Some(1));
    // degree 4 problem with k = 2
    let p = fixture("problems/porfavor.json");
    let out = run(&["relax", path_str(&p), "--order", "2"]);
    assert_eq!(out.status.code(), Some(1));
}
