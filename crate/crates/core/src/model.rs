//! Problem specification: state set, functional, measurement channels,
//! confidence parameters and solver settings, plus the JSON reader/writer
//! and the good-pair interiority check.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densities::FamilyKind;
use crate::geometry::{ExtremePoints, FeasibleSet};

pub const PROBLEM_VERSION: u32 = 1;

/// Largest admissible confidence parameter unless explicitly relaxed.
pub const EPSILON_MAX: f64 = 0.25;

/// Tolerance on sum(mu) = 1 for discrete parameters at the extreme points.
pub const SIMPLEX_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("dimension mismatch at {path}: expected {expected}, found {found}")]
    DimensionMismatch { path: String, expected: usize, found: usize },
    #[error("{path}: {message}")]
    OutOfRange { path: String, message: String },
}

impl ModelError {
    fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        ModelError::Schema { path: path.into(), message: message.into() }
    }
    fn range(path: impl Into<String>, message: impl Into<String>) -> Self {
        ModelError::OutOfRange { path: path.into(), message: message.into() }
    }
}

/// How the estimator constant is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstantMode {
    /// Half-difference of the two certified separable maxima.
    #[default]
    Certified,
    /// Midpoint of g at the two saddle states.
    ClosedForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Frank-Wolfe gap target for the inner maximizations.
    pub tol_inner: f64,
    /// Relative width of the final alpha bracket.
    pub tol_alpha: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub max_iter_inner: usize,
    pub interior_margin: f64,
    pub seed: u64,
    pub constant_mode: ConstantMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol_inner: 1e-7,
            tol_alpha: 1e-6,
            alpha_min: 1e-8,
            alpha_max: 1e8,
            max_iter_inner: 10_000,
            interior_margin: 1e-6,
            seed: 0,
            constant_mode: ConstantMode::Certified,
        }
    }
}

/// A measurement type: a density family observed `repetitions` times at
/// parameter `map_matrix * x + map_offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelModel {
    pub family: FamilyKind,
    pub map_matrix: Vec<Vec<f64>>,
    pub map_offset: Vec<f64>,
    pub repetitions: u32,
}

impl ChannelModel {
    /// The family parameter for state `x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.map_matrix
            .iter()
            .zip(&self.map_offset)
            .map(|(row, b)| b + row.iter().zip(x).map(|(a, xi)| a * xi).sum::<f64>())
            .collect()
    }

    /// `map_matrix^T v`.
    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        let n = self.map_matrix.first().map_or(0, Vec::len);
        let mut out = vec![0.0; n];
        for (row, vi) in self.map_matrix.iter().zip(v) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * vi;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub version: u32,
    pub g: Vec<f64>,
    pub feasible_set: FeasibleSet,
    pub channels: Vec<ChannelModel>,
    pub epsilon: f64,
    pub delta: f64,
    #[serde(default)]
    pub solver: SolverConfig,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Accept epsilon in (0, 1) instead of (0, 0.25).
    pub allow_large_epsilon: bool,
}

impl ProblemSpec {
    pub fn dim(&self) -> usize {
        self.feasible_set.dim()
    }

    /// ln(2 / epsilon).
    pub fn r(&self) -> f64 {
        (2.0 / self.epsilon).ln()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("problem spec serializes")
    }

    /// Structural checks shared by the parser and programmatic callers.
    pub fn check(&self, opts: ParseOptions) -> Result<(), ModelError> {
        if self.version != PROBLEM_VERSION {
            return Err(ModelError::schema(
                "version",
                format!("unsupported version {}, expected {PROBLEM_VERSION}", self.version),
            ));
        }
        self.feasible_set
            .check()
            .map_err(|e| ModelError::schema("feasible_set", e.to_string()))?;
        let n = self.dim();
        if self.g.len() != n {
            return Err(ModelError::DimensionMismatch { path: "g".into(), expected: n, found: self.g.len() });
        }
        if self.g.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::schema("g", "non-finite entry"));
        }
        for (l, ch) in self.channels.iter().enumerate() {
            let path = format!("channels[{l}]");
            ch.family
                .check()
                .map_err(|m| ModelError::schema(format!("{path}.family"), m))?;
            let m = ch.family.param_dim();
            if ch.map_matrix.len() != m {
                return Err(ModelError::DimensionMismatch {
                    path: format!("{path}.map_matrix"),
                    expected: m,
                    found: ch.map_matrix.len(),
                });
            }
            for (i, row) in ch.map_matrix.iter().enumerate() {
                if row.len() != n {
                    return Err(ModelError::DimensionMismatch {
                        path: format!("{path}.map_matrix[{i}]"),
                        expected: n,
                        found: row.len(),
                    });
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(ModelError::schema(format!("{path}.map_matrix[{i}]"), "non-finite entry"));
                }
            }
            if ch.map_offset.len() != m {
                return Err(ModelError::DimensionMismatch {
                    path: format!("{path}.map_offset"),
                    expected: m,
                    found: ch.map_offset.len(),
                });
            }
            if ch.map_offset.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::schema(format!("{path}.map_offset"), "non-finite entry"));
            }
        }
        let eps_max = if opts.allow_large_epsilon { 1.0 } else { EPSILON_MAX };
        if !(self.epsilon > 0.0 && self.epsilon < eps_max) {
            return Err(ModelError::range(
                "epsilon",
                format!("epsilon out of range (0, {eps_max}): {}", self.epsilon),
            ));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(ModelError::range("delta", format!("delta must be > 0, got {}", self.delta)));
        }
        let s = &self.solver;
        for (name, v) in [
            ("tol_inner", s.tol_inner),
            ("tol_alpha", s.tol_alpha),
            ("alpha_min", s.alpha_min),
            ("alpha_max", s.alpha_max),
            ("interior_margin", s.interior_margin),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::range(format!("solver.{name}"), format!("must be positive, got {v}")));
            }
        }
        if s.alpha_min >= s.alpha_max {
            return Err(ModelError::range(
                "solver.alpha_min",
                format!("alpha_min {} must be below alpha_max {}", s.alpha_min, s.alpha_max),
            ));
        }
        if s.max_iter_inner == 0 {
            return Err(ModelError::range("solver.max_iter_inner", "must be at least 1"));
        }
        Ok(())
    }
}

pub fn parse_problem(text: &str) -> Result<ProblemSpec, ModelError> {
    parse_problem_with(text, ParseOptions::default())
}

pub fn parse_problem_with(text: &str, opts: ParseOptions) -> Result<ProblemSpec, ModelError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let spec: ProblemSpec = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ModelError::schema(if path == "." { "(root)".to_string() } else { path }, e.into_inner().to_string())
    })?;
    spec.check(opts)?;
    Ok(spec)
}

/// A failed good-pair requirement. Violations are data, not errors.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub channel: Option<usize>,
    pub vertex: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.channel, self.vertex) {
            (Some(c), Some(v)) => write!(f, "channel {c}, vertex {v}: {}", self.message),
            (Some(c), None) => write!(f, "channel {c}: {}", self.message),
            _ => write!(f, "{}", self.message),
        }
    }
}

/// Every extreme point of the state set must map strictly inside each
/// channel's parameter domain with at least `interior_margin` to spare.
/// Since the maps are affine and the domains convex, that covers all of X.
pub fn validate_problem(spec: &ProblemSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    if spec.channels.is_empty() {
        out.push(Violation { channel: None, vertex: None, message: "no measurement channels".into() });
    }
    let margin = spec.solver.interior_margin;
    let extremes = spec.feasible_set.extreme_points();
    for (l, ch) in spec.channels.iter().enumerate() {
        if ch.repetitions == 0 {
            out.push(Violation {
                channel: Some(l),
                vertex: None,
                message: "repetitions must be at least 1".into(),
            });
        }
        match &extremes {
            ExtremePoints::Vertices(vs) => {
                for (j, v) in vs.iter().enumerate() {
                    let mu = ch.apply(v);
                    if let Some(message) = parameter_problem(&ch.family, &mu, margin) {
                        out.push(Violation { channel: Some(l), vertex: Some(j), message });
                    }
                }
            }
            ExtremePoints::BoxBounds { lower, upper } => {
                out.extend(
                    box_interval_problems(ch, lower, upper, margin)
                        .into_iter()
                        .map(|message| Violation { channel: Some(l), vertex: None, message }),
                );
            }
        }
    }
    out
}

fn parameter_problem(family: &FamilyKind, mu: &[f64], margin: f64) -> Option<String> {
    let m = family.domain_margin(mu);
    if m < margin {
        return Some(format!(
            "parameter {mu:?} is within {m:e} of the {} domain boundary (need margin {margin:e})",
            family.name()
        ));
    }
    if let FamilyKind::Discrete { .. } = family {
        let s: f64 = mu.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Some(format!("discrete parameter {mu:?} sums to {s}, not 1"));
        }
    }
    None
}

/// Interval-arithmetic version of the vertex check for boxes too large to
/// enumerate. Coordinate-wise bounds of an affine map over a box are exact.
fn box_interval_problems(ch: &ChannelModel, lower: &[f64], upper: &[f64], margin: f64) -> Vec<String> {
    let mut out = Vec::new();
    if matches!(ch.family, FamilyKind::GaussianVec { .. }) {
        return out;
    }
    for (i, (row, b)) in ch.map_matrix.iter().zip(&ch.map_offset).enumerate() {
        let lo: f64 = b + row
            .iter()
            .zip(lower.iter().zip(upper))
            .map(|(a, (l, u))| (a * l).min(a * u))
            .sum::<f64>();
        if lo < margin {
            out.push(format!(
                "parameter coordinate {i} reaches {lo} over the box (need margin {margin:e})"
            ));
        }
    }
    if let FamilyKind::Discrete { .. } = ch.family {
        let n = lower.len();
        let col_sums: Vec<f64> = (0..n).map(|j| ch.map_matrix.iter().map(|r| r[j]).sum()).collect();
        let off: f64 = ch.map_offset.iter().sum();
        if col_sums.iter().any(|c| c.abs() > SIMPLEX_SUM_TOL) || (off - 1.0).abs() > SIMPLEX_SUM_TOL {
            out.push("affine map does not keep discrete parameters on the simplex".into());
        }
    }
    out
}
