use std::fs;
use std::path::{Path, PathBuf};

use minimax_cli::{run, EXIT_INPUT, EXIT_OK, EXIT_WARNING};
use minimax_core::estimator::AffineEstimator;
use minimax_core::validate::CoverageReport;
use tempfile::TempDir;

fn problem(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/problems").join(format!("{name}.json"))
}

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn minimax(args: &[&str]) -> Run {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("minimax").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    Run { code, out: String::from_utf8(out).unwrap(), err: String::from_utf8(err).unwrap() }
}

fn field(text: &str, key: &str) -> f64 {
    let line = text.lines().find(|l| l.starts_with(&format!("{key}: "))).unwrap_or_else(|| panic!("no {key} in {text}"));
    line[key.len() + 2..].parse().unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn solve_writes_estimator_and_report() {
    let dir = TempDir::new().unwrap();
    let est_path = dir.path().join("est.json");
    let r = minimax(&["solve", path_str(&problem("two_point")), "-o", path_str(&est_path)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!((field(&r.out, "risk") - 0.3).abs() < 2e-3);
    assert_eq!(field(&r.out, "epsilon"), 0.05);
    assert!(r.out.contains("theta: "));
    assert!(r.err.contains("alpha bound active"));
    let est = AffineEstimator::from_json(&fs::read_to_string(&est_path).unwrap()).unwrap();
    assert_eq!(est.epsilon, 0.05);
}

#[test]
fn estimate_prints_value_and_interval() {
    let dir = TempDir::new().unwrap();
    let est_path = dir.path().join("est.json");
    let obs_path = dir.path().join("obs.json");
    assert_eq!(minimax(&["solve", path_str(&problem("two_point")), "-o", path_str(&est_path)]).code, EXIT_OK);
    fs::write(&obs_path, r#"{"channels": [{"index": 0, "outcomes": [0]}]}"#).unwrap();
    let r = minimax(&["estimate", path_str(&est_path), path_str(&obs_path)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let (v, risk) = (field(&r.out, "estimate"), field(&r.out, "risk"));
    let est = AffineEstimator::from_json(&fs::read_to_string(&est_path).unwrap()).unwrap();
    assert!((v - est.constant_c).abs() <= risk);
    assert!(r.out.contains(&format!("interval: [{}, {}]", v - risk, v + risk)));

    fs::write(&obs_path, r#"{"channels": [{"index": 0, "outcomes": [0, 1]}]}"#).unwrap();
    let r = minimax(&["estimate", path_str(&est_path), path_str(&obs_path)]);
    assert_eq!(r.code, EXIT_INPUT);
    assert!(r.err.starts_with("observation error:"), "{}", r.err);
}

#[test]
fn sweep_over_repetitions() {
    let r = minimax(&["sweep", path_str(&problem("two_point")), "--vary", "repetitions", "--values", "1,10,100"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let lines: Vec<&str> = r.out.lines().collect();
    assert_eq!(lines[0], "value,risk,alpha_star,psi_upper,psi_lower");
    assert_eq!(lines.len(), 4);
    let risks: Vec<f64> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(risks[1] <= risks[0] + 1e-9 && risks[2] <= risks[1] + 1e-9, "{risks:?}");
    assert!(lines[1].starts_with("1.0,"));

    let r = minimax(&["sweep", path_str(&problem("two_point")), "--vary", "repetitions", "--values", "1.5"]);
    assert_eq!(r.code, EXIT_INPUT);
}

#[test]
fn sweep_over_epsilon_to_file() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("sweep.csv");
    let r = minimax(&[
        "sweep",
        path_str(&problem("gaussian")),
        "--vary",
        "epsilon",
        "--values",
        "0.01,0.1",
        "-o",
        path_str(&out),
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let text = fs::read_to_string(&out).unwrap();
    let risks: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(risks[0] > risks[1]);
}

#[test]
fn validate_writes_a_passing_report() {
    let dir = TempDir::new().unwrap();
    let est_path = dir.path().join("est.json");
    let rep_path = dir.path().join("coverage.json");
    let p = problem("product");
    assert_eq!(minimax(&["solve", path_str(&p), "-o", path_str(&est_path), "--epsilon", "0.1"]).code, EXIT_OK);
    let r = minimax(&[
        "validate",
        path_str(&p),
        path_str(&est_path),
        "-o",
        path_str(&rep_path),
        "--n-samples",
        "20000",
        "--random-probes",
        "2",
        "--workers",
        "3",
        "--seed",
        "4",
    ]);
    assert_eq!(r.code, EXIT_OK, "{}{}", r.out, r.err);
    assert!(r.out.contains("coverage: pass"));
    let report: CoverageReport = serde_json::from_str(&fs::read_to_string(&rep_path).unwrap()).unwrap();
    assert_eq!(report.probes.len(), 4);
    assert_eq!((report.seed, report.workers), (4, 3));
    assert!(report.pass);
}

#[test]
fn validate_with_explicit_probes() {
    let dir = TempDir::new().unwrap();
    let est_path = dir.path().join("est.json");
    let probes = dir.path().join("probes.json");
    let p = problem("two_point");
    assert_eq!(minimax(&["solve", path_str(&p), "-o", path_str(&est_path)]).code, EXIT_OK);
    fs::write(&probes, "[[0.5, 0.5], [0.3, 0.7]]").unwrap();
    let r = minimax(&["validate", path_str(&p), path_str(&est_path), "--probes", path_str(&probes), "--n-samples", "10000"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let report: CoverageReport = serde_json::from_str(&r.out).unwrap();
    assert_eq!(report.probes[1].state, vec![0.3, 0.7]);

    fs::write(&probes, "[[0.9, 0.1]]").unwrap();
    let r = minimax(&["validate", path_str(&p), path_str(&est_path), "--probes", path_str(&probes), "--n-samples", "10000"]);
    assert_eq!(r.code, EXIT_INPUT);
    assert!(r.err.contains("outside the feasible set"), "{}", r.err);
}

#[test]
fn input_errors_exit_with_two() {
    let r = minimax(&["solve", "/nonexistent/problem.json"]);
    assert_eq!(r.code, EXIT_INPUT);
    assert!(r.err.starts_with("input error:"), "{}", r.err);

    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"version": 1, "g": "nope"}"#).unwrap();
    let r = minimax(&["solve", path_str(&bad)]);
    assert_eq!(r.code, EXIT_INPUT);
    assert!(r.err.starts_with("schema error:") && r.err.contains(" g"), "{}", r.err);

    let r = minimax(&["solve", path_str(&problem("two_point")), "--epsilon", "0.3"]);
    assert_eq!(r.code, EXIT_INPUT);
    assert!(r.err.contains("epsilon out of range (0, 0.25)"), "{}", r.err);

    let text = fs::read_to_string(problem("two_point")).unwrap().replace("[[0.2, 0.8], [0.8, 0.2]]", "[[0.0, 1.0], [1.0, 0.0]]");
    fs::write(&bad, text).unwrap();
    let r = minimax(&["solve", path_str(&bad)]);
    assert_eq!(r.code, EXIT_INPUT);
    assert!(r.err.starts_with("model error:") && r.err.contains("channel 0, vertex 0"), "{}", r.err);

    let r = minimax(&["solve"]);
    assert_eq!(r.code, EXIT_INPUT);
    let r = minimax(&["--help"]);
    assert_eq!(r.code, EXIT_OK);
    assert!(r.out.contains("sweep"));
}

#[test]
fn large_epsilon_needs_the_flag() {
    let r = minimax(&["solve", path_str(&problem("two_point")), "--epsilon", "0.3", "--allow-large-epsilon"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(r.out.contains("theta: omitted"));
}

#[test]
fn strict_escalates_unmet_precision() {
    let p = problem("gaussian");
    let r = minimax(&["solve", path_str(&p), "--delta", "1e-300"]);
    assert_eq!(r.code, EXIT_OK);
    assert!(r.err.contains("precision not met"));
    let r = minimax(&["solve", path_str(&p), "--delta", "1e-300", "--strict"]);
    assert_eq!(r.code, EXIT_WARNING);
    let r = minimax(&["solve", path_str(&p), "--strict"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
}

#[test]
fn flags_override_solver_settings() {
    let dir = TempDir::new().unwrap();
    let est_path = dir.path().join("est.json");
    let r = minimax(&[
        "solve",
        path_str(&problem("gaussian")),
        "-o",
        path_str(&est_path),
        "--constant-mode",
        "closed-form",
        "--tol-inner",
        "1e-9",
        "--tol-alpha",
        "1e-5",
        "--seed",
        "12",
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let est = AffineEstimator::from_json(&fs::read_to_string(&est_path).unwrap()).unwrap();
    let s = &est.provenance.solver;
    assert_eq!((s.tol_inner, s.tol_alpha, s.seed), (1e-9, 1e-5, 12));
    assert_eq!(est.constant_c, est.provenance.constant_closed_form);
}
