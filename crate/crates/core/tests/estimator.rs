use minimax_core::densities::Outcome;
use minimax_core::estimator::{
    certify, parse_observations, simple_constant, AffineEstimator, ChannelObservations, EstimatorError,
    ObservationSet,
};
use minimax_core::model::{parse_problem, ConstantMode, ProblemSpec};
use minimax_core::saddle::minimize_alpha;
use minimax_core::solve;

const TWO_POINT: &str = include_str!("../problems/two_point.json");
const SINGLETON: &str = include_str!("../problems/singleton.json");
const SHIPPED: [&str; 5] = [
    TWO_POINT,
    include_str!("../problems/poisson.json"),
    include_str!("../problems/gaussian.json"),
    include_str!("../problems/product.json"),
    SINGLETON,
];

fn two_point(reps: u32) -> ProblemSpec {
    let mut spec = parse_problem(TWO_POINT).unwrap();
    spec.channels[0].repetitions = reps;
    spec
}

fn single(index: usize, outcomes: Vec<Outcome>) -> ObservationSet {
    ObservationSet { channels: vec![ChannelObservations { index, outcomes }] }
}

fn slack(est: &AffineEstimator) -> f64 {
    let p = &est.provenance;
    p.inner_gap + p.certify_gaps[0] + p.certify_gaps[1]
}

#[test]
fn benchmark_risk_and_constant() {
    let (_, est) = solve(&two_point(1)).unwrap();
    assert!((est.risk - 0.3).abs() < 2e-3, "{}", est.risk);
    assert!((est.constant_c - 0.5).abs() < 1e-9);
    assert!((est.provenance.constant_closed_form - 0.5).abs() < 1e-9);
    assert_eq!(est.channels[0].phi.as_ref().map(Vec::len), Some(2));
}

#[test]
fn certified_constant_approaches_the_midpoint() {
    for reps in [1, 100] {
        let mut spec = two_point(reps);
        spec.solver.tol_inner = 1e-9;
        let saddle = minimize_alpha(&spec).unwrap();
        let cert = certify(&spec, &saddle).unwrap();
        let mid = simple_constant(&spec, &saddle);
        assert!((cert.c - mid).abs() <= 1e-4, "R = {reps}: {} vs {mid}", cert.c);
    }
}

#[test]
fn singleton_estimator_is_constant() {
    let spec = parse_problem(SINGLETON).unwrap();
    let (saddle, est) = solve(&spec).unwrap();
    let cert = certify(&spec, &saddle).unwrap();
    assert_eq!(cert.u_upper, 0.3);
    assert_eq!(cert.v_upper, -0.3);
    assert_eq!(cert.c, 0.3);
    assert_eq!(simple_constant(&spec, &saddle), 0.3);
    assert_eq!(est.risk, spec.solver.alpha_min * spec.r());
    for k in 0..2 {
        assert_eq!(est.evaluate(&single(0, vec![Outcome::Index(k)])).unwrap(), 0.3);
    }
}

#[test]
fn risk_invariants_on_shipped_examples() {
    for text in SHIPPED {
        let spec = parse_problem(text).unwrap();
        let (_, est) = solve(&spec).unwrap();
        assert!(est.risk >= est.alpha * spec.r());
        let spread = 0.5 * (est.g_x_star - est.g_y_star).abs();
        // (x*, y*) satisfies the affinity constraint up to the alpha bracket
        let tol = slack(&est) + 10.0 * spec.solver.tol_alpha * (1.0 + est.risk);
        assert!(est.risk >= spread - tol, "{} vs {spread}", est.risk);
        for ch in &est.channels {
            assert!(ch.family.domain_margin(&ch.mu_star) > 0.0);
            assert!(ch.family.domain_margin(&ch.nu_star) > 0.0);
        }
    }
}

#[test]
fn sign_flip_negates_the_constant() {
    for text in SHIPPED {
        let spec = parse_problem(text).unwrap();
        let mut flipped = spec.clone();
        flipped.g.iter_mut().for_each(|v| *v = -*v);
        let (_, a) = solve(&spec).unwrap();
        let (_, b) = solve(&flipped).unwrap();
        let s = 2.0 * (slack(&a) + slack(&b)) + 1e-9;
        assert!((a.risk - b.risk).abs() <= s + a.provenance.delta_solver + b.provenance.delta_solver);
        assert!((a.constant_c + b.constant_c).abs() <= s + 1e-6, "{} vs {}", a.constant_c, b.constant_c);
    }
}

#[test]
fn scaling_the_functional_scales_everything() {
    // alpha* sits in a flat valley of the saddle function; tight tolerances
    // pin it down well enough to compare the two solutions at 1e-6
    let mut spec = two_point(100);
    spec.solver.tol_inner = 1e-13;
    spec.solver.tol_alpha = 1e-10;
    let mut scaled = spec.clone();
    scaled.g.iter_mut().for_each(|v| *v *= 2.0);
    let (_, a) = solve(&spec).unwrap();
    let (_, b) = solve(&scaled).unwrap();
    let rel = |x: f64, y: f64| (x - y).abs() / y.abs().max(1e-12);
    assert!(rel(b.risk, 2.0 * a.risk) < 1e-6);
    assert!(rel(b.constant_c, 2.0 * a.constant_c) < 1e-6);
    assert!(rel(b.alpha, 2.0 * a.alpha) < 1e-6, "{} vs {}", b.alpha, a.alpha);
    for k in 0..2 {
        let obs = single(0, vec![Outcome::Index(k); 100]);
        let da = a.evaluate(&obs).unwrap() - a.constant_c;
        let db = b.evaluate(&obs).unwrap() - b.constant_c;
        assert!(rel(db, 2.0 * da) < 1e-6, "{db} vs {da}");
    }
}

#[test]
fn outcome_values_are_symmetric_about_the_constant() {
    let (_, est) = solve(&two_point(100)).unwrap();
    let ch = &est.channels[0];
    let mut est1 = est.clone();
    est1.channels[0].repetitions = 1;
    let v0 = est1.evaluate(&single(0, vec![Outcome::Index(0)])).unwrap();
    let v1 = est1.evaluate(&single(0, vec![Outcome::Index(1)])).unwrap();
    let (m, n) = (&ch.mu_star, &ch.nu_star);
    let expected = est.alpha / 2.0 * ((m[0] * n[1]) / (m[1] * n[0])).ln();
    assert!((v0 - v1 - expected).abs() < 1e-12);
    assert!(((v0 + v1) / 2.0 - est.constant_c).abs() < 1e-9);
}

#[test]
fn repetitions_add_up() {
    let (_, est) = solve(&two_point(2)).unwrap();
    let mut est1 = est.clone();
    est1.channels[0].repetitions = 1;
    let once = est1.evaluate(&single(0, vec![Outcome::Index(0)])).unwrap() - est.constant_c;
    let twice = est.evaluate(&single(0, vec![Outcome::Index(0); 2])).unwrap() - est.constant_c;
    assert!((twice - 2.0 * once).abs() <= 1e-15 * (1.0 + est.constant_c.abs()), "{twice} vs {once}");
}

#[test]
fn channels_add_up() {
    let spec = parse_problem(SHIPPED[3]).unwrap();
    let (_, est) = solve(&spec).unwrap();
    let obs = ObservationSet {
        channels: vec![
            ChannelObservations { index: 0, outcomes: vec![Outcome::Index(2); 3] },
            ChannelObservations { index: 1, outcomes: vec![Outcome::Counts(vec![4]); 5] },
        ],
    };
    let total = est.evaluate(&obs).unwrap() - est.constant_c;
    let mut parts = 0.0;
    for ch in &est.channels {
        let omega = if ch.mu_star.len() == 3 { Outcome::Index(2) } else { Outcome::Counts(vec![4]) };
        let lr = ch.family.log_density(&ch.mu_star, &omega).unwrap() - ch.family.log_density(&ch.nu_star, &omega).unwrap();
        parts += f64::from(ch.repetitions) * est.alpha / 2.0 * lr;
    }
    assert!((total - parts).abs() < 1e-12);
}

#[test]
fn observation_errors() {
    let (_, est) = solve(&two_point(2)).unwrap();
    let err = est.evaluate(&single(0, vec![Outcome::Index(0)])).unwrap_err();
    assert!(matches!(err, EstimatorError::Observation(_)), "{err}");
    let err = est.evaluate(&single(0, vec![Outcome::Index(5); 2])).unwrap_err();
    assert!(matches!(err, EstimatorError::Density(_)), "{err}");
    let err = est.evaluate(&ObservationSet { channels: vec![] }).unwrap_err();
    assert!(matches!(err, EstimatorError::Observation(_)));
    let obs = parse_observations(&est, r#"{"channels": [{"index": 0, "outcomes": [1, 0]}]}"#).unwrap();
    assert_eq!(obs.channels[0].outcomes, vec![Outcome::Index(1), Outcome::Index(0)]);
    assert!(parse_observations(&est, r#"{"channels": [{"index": 3, "outcomes": [1, 0]}]}"#).is_err());
    assert!(parse_observations(&est, r#"{"channels": [{"index": 0, "outcomes": [0.5, 0]}]}"#).is_err());
    let back = parse_observations(&est, &obs.to_json()).unwrap();
    assert_eq!(back, obs);
}

#[test]
fn closed_form_mode_still_certifies() {
    let mut spec = parse_problem(SHIPPED[2]).unwrap();
    spec.solver.constant_mode = ConstantMode::ClosedForm;
    let (_, est) = solve(&spec).unwrap();
    let p = &est.provenance;
    assert_eq!(est.constant_c, p.constant_closed_form);
    let r = spec.r();
    assert!(est.risk >= p.u_upper - est.constant_c + est.alpha * r);
    assert!(est.risk >= p.v_upper + est.constant_c + est.alpha * r);
    assert!((est.risk - 0.5 * p.psi_upper).abs() <= slack(&est) + 1e-10);
}

#[test]
fn json_round_trip_is_lossless() {
    for text in SHIPPED {
        let (_, est) = solve(&parse_problem(text).unwrap()).unwrap();
        let back = AffineEstimator::from_json(&est.to_json()).unwrap();
        assert_eq!(back, est);
        assert_eq!(back.risk.to_bits(), est.risk.to_bits());
        assert_eq!(back.constant_c.to_bits(), est.constant_c.to_bits());
        assert_eq!(back.to_json(), est.to_json());
    }
    let (_, est) = solve(&two_point(3)).unwrap();
    let back = AffineEstimator::from_json(&est.to_json()).unwrap();
    let obs = single(0, vec![Outcome::Index(0), Outcome::Index(1), Outcome::Index(1)]);
    assert_eq!(back.evaluate(&obs).unwrap().to_bits(), est.evaluate(&obs).unwrap().to_bits());
}

#[test]
fn rejects_other_versions_and_bad_schema() {
    let (_, est) = solve(&two_point(1)).unwrap();
    let text = est.to_json().replacen("\"version\": 1", "\"version\": 0", 1);
    assert_eq!(AffineEstimator::from_json(&text).unwrap_err(), EstimatorError::UnsupportedVersion(0));
    let text = est.to_json().replacen("\"risk\":", "\"risk\": \"high\", \"old_risk\":", 1);
    match AffineEstimator::from_json(&text).unwrap_err() {
        EstimatorError::Schema { path, .. } => assert_eq!(path, "risk"),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn report_factor() {
    let (_, est) = solve(&two_point(1)).unwrap();
    let report = est.report();
    assert_eq!(report.theta, Some(2.0 + 64f64.ln() / 5f64.ln()));
    let mut wide = est.clone();
    wide.epsilon = 0.25;
    assert_eq!(wide.report().theta, None);
    assert!(wide.report().to_string().contains("theta: omitted"));
}
