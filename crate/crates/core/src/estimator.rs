//! The canonical affine estimator ĝ(ω) = c + Σ_l Σ_j (α/2) ln(p_μl(ω_lj) / p_νl(ω_lj)),
//! its certified constant and risk, and its JSON form.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::densities::{DensityError, FamilyKind, Outcome};
use crate::geometry::dot;
use crate::model::{ConstantMode, ProblemSpec, SolverConfig};
use crate::saddle::{maximize, ActiveSet, ConcaveObjective, ProductSet, PsiBracket, SaddleSolution, SolveError};

pub const ESTIMATOR_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("unsupported estimator version {0}, expected {ESTIMATOR_VERSION}")]
    UnsupportedVersion(u64),
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("observation error: {0}")]
    Observation(String),
    #[error(transparent)]
    Density(#[from] DensityError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorChannel {
    pub family: FamilyKind,
    pub mu_star: Vec<f64>,
    pub nu_star: Vec<f64>,
    pub repetitions: u32,
    /// φ per outcome, (α/2) ln(μ_i / ν_i); discrete channels only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub x_star: Vec<f64>,
    pub y_star: Vec<f64>,
    pub psi_lower: f64,
    pub psi_upper: f64,
    /// Certified lower bound on the saddle value.
    pub saddle_lower_bound: f64,
    pub delta_solver: f64,
    pub precision_met: bool,
    pub alpha_bound_active: bool,
    pub inner_gap: f64,
    pub inner_iterations: usize,
    pub inner_converged: bool,
    pub u_upper: f64,
    pub v_upper: f64,
    pub certify_gaps: [f64; 2],
    pub constant_certified: f64,
    pub constant_closed_form: f64,
    pub constant_mode: ConstantMode,
    pub trace: Vec<PsiBracket>,
    pub solver: SolverConfig,
    pub warnings: Vec<String>,
    pub crate_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineEstimator {
    pub version: u32,
    pub alpha: f64,
    pub constant_c: f64,
    pub risk: f64,
    pub epsilon: f64,
    pub g_x_star: f64,
    pub g_y_star: f64,
    pub channels: Vec<EstimatorChannel>,
    pub provenance: Provenance,
}

/// Certified maxima of the two separable problems that fix c and the risk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certification {
    pub u_upper: f64,
    pub v_upper: f64,
    /// (U_upper − V_upper) / 2.
    pub c: f64,
    pub gaps: (f64, f64),
}

/// x ↦ sign·gᵀx + α Σ_l R_l ln T(A_l x; μ_l, ν_l), concave in x.
struct TiltedObjective<'a> {
    spec: &'a ProblemSpec,
    alpha: f64,
    sign: f64,
    params: Vec<(&'a [f64], &'a [f64])>,
}

impl ConcaveObjective for TiltedObjective<'_> {
    fn value(&self, x: &[f64]) -> Result<f64, SolveError> {
        let mut v = self.sign * dot(&self.spec.g, x);
        for (ch, (m, n)) in self.spec.channels.iter().zip(&self.params) {
            v += self.alpha * f64::from(ch.repetitions) * ch.family.tilted_affinity_log(&ch.apply(x), m, n)?;
        }
        Ok(v)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, SolveError> {
        let mut grad: Vec<f64> = self.spec.g.iter().map(|v| self.sign * v).collect();
        for (ch, (m, n)) in self.spec.channels.iter().zip(&self.params) {
            let d = ch.family.tilted_affinity_grad(&ch.apply(x), m, n)?;
            let w = self.alpha * f64::from(ch.repetitions);
            for (o, v) in grad.iter_mut().zip(ch.apply_transpose(&d)) {
                *o += w * v;
            }
        }
        Ok(grad)
    }

    fn scale(&self) -> f64 {
        crate::saddle::objective_scale(self.spec, self.alpha)
    }
}

fn channel_params(spec: &ProblemSpec, x: &[f64], y: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    spec.channels.iter().map(|ch| (ch.apply(x), ch.apply(y))).unzip()
}

/// U = max_x [gᵀx + α Σ R ln T(A x; μ*, ν*)] and
/// V = max_y [−gᵀy + α Σ R ln T(A y; ν*, μ*)], each with its FW certificate.
pub fn certify(spec: &ProblemSpec, saddle: &SaddleSolution) -> Result<Certification, SolveError> {
    let (x, y) = (&saddle.inner.x_star, &saddle.inner.y_star);
    let (mus, nus) = channel_params(spec, x, y);
    let s = &spec.solver;
    let set = ProductSet { set: &spec.feasible_set, blocks: 1 };

    let u_obj = TiltedObjective {
        spec,
        alpha: saddle.alpha_star,
        sign: 1.0,
        params: mus.iter().zip(&nus).map(|(m, n)| (m.as_slice(), n.as_slice())).collect(),
    };
    let u = maximize(&u_obj, set, ActiveSet::single(x.clone()), s.tol_inner, s.max_iter_inner)?;
    let v_obj = TiltedObjective {
        spec,
        alpha: saddle.alpha_star,
        sign: -1.0,
        params: nus.iter().zip(&mus).map(|(n, m)| (n.as_slice(), m.as_slice())).collect(),
    };
    let v = maximize(&v_obj, set, ActiveSet::single(y.clone()), s.tol_inner, s.max_iter_inner)?;

    let u_upper = u.value + u.gap;
    let v_upper = v.value + v.gap;
    Ok(Certification { u_upper, v_upper, c: 0.5 * (u_upper - v_upper), gaps: (u.gap, v.gap) })
}

/// ½(gᵀx* + gᵀy*).
pub fn simple_constant(spec: &ProblemSpec, saddle: &SaddleSolution) -> f64 {
    0.5 * (dot(&spec.g, &saddle.inner.x_star) + dot(&spec.g, &saddle.inner.y_star))
}

pub fn build(spec: &ProblemSpec, saddle: &SaddleSolution) -> Result<AffineEstimator, SolveError> {
    let alpha = saddle.alpha_star;
    let (x, y) = (&saddle.inner.x_star, &saddle.inner.y_star);
    let (mus, nus) = channel_params(spec, x, y);
    let mut channels = Vec::with_capacity(spec.channels.len());
    for ((ch, mu), nu) in spec.channels.iter().zip(mus).zip(nus) {
        ch.family.check_param(&mu)?;
        ch.family.check_param(&nu)?;
        let phi = matches!(ch.family, FamilyKind::Discrete { .. })
            .then(|| mu.iter().zip(&nu).map(|(m, n)| 0.5 * alpha * (m / n).ln()).collect());
        channels.push(EstimatorChannel {
            family: ch.family.clone(),
            mu_star: mu,
            nu_star: nu,
            repetitions: ch.repetitions,
            phi,
        });
    }

    let cert = certify(spec, saddle)?;
    let closed = simple_constant(spec, saddle);
    let c = match spec.solver.constant_mode {
        ConstantMode::Certified => cert.c,
        ConstantMode::ClosedForm => closed,
    };
    let risk = match spec.solver.constant_mode {
        // equal to the max below when c is the certified half-difference
        ConstantMode::Certified => 0.5 * (cert.u_upper + cert.v_upper) + alpha * spec.r(),
        ConstantMode::ClosedForm => (cert.u_upper - c).max(cert.v_upper + c) + alpha * spec.r(),
    };

    let mut warnings = Vec::new();
    if !saddle.precision_met {
        warnings.push(format!(
            "precision not met: achieved delta {:e} exceeds requested {:e}",
            saddle.delta_solver, spec.delta
        ));
    }
    if saddle.alpha_bound_active {
        warnings.push(format!("alpha bound active at alpha = {:e}", alpha));
    }
    if !saddle.inner.converged {
        warnings.push(format!("inner solver stopped with gap {:e}", saddle.inner.fw_gap));
    }

    Ok(AffineEstimator {
        version: ESTIMATOR_VERSION,
        alpha,
        constant_c: c,
        risk,
        epsilon: spec.epsilon,
        g_x_star: dot(&spec.g, x),
        g_y_star: dot(&spec.g, y),
        channels,
        provenance: Provenance {
            x_star: x.clone(),
            y_star: y.clone(),
            psi_lower: saddle.psi_lower,
            psi_upper: saddle.psi_upper,
            saddle_lower_bound: saddle.value_lower_bound,
            delta_solver: saddle.delta_solver,
            precision_met: saddle.precision_met,
            alpha_bound_active: saddle.alpha_bound_active,
            inner_gap: saddle.inner.fw_gap,
            inner_iterations: saddle.inner.iterations,
            inner_converged: saddle.inner.converged,
            u_upper: cert.u_upper,
            v_upper: cert.v_upper,
            certify_gaps: [cert.gaps.0, cert.gaps.1],
            constant_certified: cert.c,
            constant_closed_form: closed,
            constant_mode: spec.solver.constant_mode,
            trace: saddle.trace.clone(),
            solver: spec.solver.clone(),
            warnings,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
        },
    })
}

/// Outcomes for one channel, `repetitions` of them.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelObservations {
    pub index: usize,
    pub outcomes: Vec<Outcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub channels: Vec<ChannelObservations>,
}

/// Parses `{"channels": [{"index": l, "outcomes": [...]}]}`, decoding each
/// outcome by the family of channel `l`.
pub fn parse_observations(est: &AffineEstimator, text: &str) -> Result<ObservationSet, EstimatorError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| EstimatorError::Schema {
        path: "(root)".into(),
        message: e.to_string(),
    })?;
    let schema = |path: String, message: &str| EstimatorError::Schema { path, message: message.into() };
    let entries = doc
        .get("channels")
        .and_then(Value::as_array)
        .ok_or_else(|| schema("channels".into(), "expected an array"))?;
    let mut channels = Vec::with_capacity(entries.len());
    for (k, entry) in entries.iter().enumerate() {
        let index = entry
            .get("index")
            .and_then(Value::as_u64)
            .ok_or_else(|| schema(format!("channels[{k}].index"), "expected a non-negative integer"))?
            as usize;
        let ch = est
            .channels
            .get(index)
            .ok_or_else(|| EstimatorError::Observation(format!("channel index {index} out of range")))?;
        let raw = entry
            .get("outcomes")
            .and_then(Value::as_array)
            .ok_or_else(|| schema(format!("channels[{k}].outcomes"), "expected an array"))?;
        let outcomes = raw.iter().map(|v| ch.family.outcome_from_json(v)).collect::<Result<_, _>>()?;
        channels.push(ChannelObservations { index, outcomes });
    }
    Ok(ObservationSet { channels })
}

impl ObservationSet {
    pub fn to_json(&self) -> String {
        let channels: Vec<Value> = self
            .channels
            .iter()
            .map(|c| serde_json::json!({"index": c.index, "outcomes": c.outcomes}))
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({ "channels": channels })).expect("observations serialize")
    }
}

impl AffineEstimator {
    /// ĝ(ω). Every channel must appear exactly once with exactly
    /// `repetitions` outcomes.
    pub fn evaluate(&self, obs: &ObservationSet) -> Result<f64, EstimatorError> {
        let mut seen = vec![false; self.channels.len()];
        let mut phi = 0.0;
        for entry in &obs.channels {
            let ch = self.channels.get(entry.index).ok_or_else(|| {
                EstimatorError::Observation(format!("channel index {} out of range", entry.index))
            })?;
            if std::mem::replace(&mut seen[entry.index], true) {
                return Err(EstimatorError::Observation(format!("channel {} listed twice", entry.index)));
            }
            if entry.outcomes.len() != ch.repetitions as usize {
                return Err(EstimatorError::Observation(format!(
                    "channel {} has {} outcomes, expected {}",
                    entry.index,
                    entry.outcomes.len(),
                    ch.repetitions
                )));
            }
            for omega in &entry.outcomes {
                phi += ch.family.log_density_ratio(&ch.mu_star, &ch.nu_star, omega)?;
            }
        }
        if let Some(l) = seen.iter().position(|s| !s) {
            return Err(EstimatorError::Observation(format!("channel {l} has no outcomes")));
        }
        Ok(self.constant_c + 0.5 * self.alpha * phi)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("estimator serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EstimatorError> {
        let doc: Value = serde_json::from_str(text).map_err(|e| EstimatorError::Schema {
            path: "(root)".into(),
            message: e.to_string(),
        })?;
        match doc.get("version").and_then(Value::as_u64) {
            Some(v) if v == u64::from(ESTIMATOR_VERSION) => {}
            Some(v) => return Err(EstimatorError::UnsupportedVersion(v)),
            None => {
                return Err(EstimatorError::Schema {
                    path: "version".into(),
                    message: "missing or not an integer".into(),
                })
            }
        }
        // re-parse from text rather than the Value so floats keep every bit
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| EstimatorError::Schema {
            path: e.path().to_string(),
            message: e.into_inner().to_string(),
        })
    }

    pub fn report(&self) -> RiskReport {
        let (theta, note) = match near_optimality_factor(self.epsilon) {
            Some(t) => (
                Some(t),
                "risk <= theta(epsilon) * minimax risk + delta; the minimax risk itself is not computed".to_string(),
            ),
            None => (None, "theta(epsilon) is only defined for epsilon in (0, 0.25)".to_string()),
        };
        RiskReport {
            risk: self.risk,
            epsilon: self.epsilon,
            alpha_star: self.alpha,
            theta,
            note,
            constant_c: self.constant_c,
            constant_difference: self.provenance.constant_certified - self.provenance.constant_closed_form,
            delta_achieved: self.provenance.delta_solver,
            precision_met: self.provenance.precision_met,
            alpha_bound_active: self.provenance.alpha_bound_active,
        }
    }
}

/// ϑ(ε) = 2 + ln 64 / ln(0.25/ε) for ε in (0, 0.25).
pub fn near_optimality_factor(epsilon: f64) -> Option<f64> {
    (epsilon > 0.0 && epsilon < 0.25).then(|| 2.0 + 64f64.ln() / (0.25 / epsilon).ln())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskReport {
    pub risk: f64,
    pub epsilon: f64,
    pub alpha_star: f64,
    pub theta: Option<f64>,
    pub note: String,
    pub constant_c: f64,
    /// Certified constant minus the closed-form midpoint.
    pub constant_difference: f64,
    pub delta_achieved: f64,
    pub precision_met: bool,
    pub alpha_bound_active: bool,
}

impl fmt::Display for RiskReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "risk: {}", self.risk)?;
        writeln!(f, "epsilon: {}", self.epsilon)?;
        writeln!(f, "alpha_star: {}", self.alpha_star)?;
        match self.theta {
            Some(t) => writeln!(f, "theta: {t}")?,
            None => writeln!(f, "theta: omitted")?,
        }
        writeln!(f, "note: {}", self.note)?;
        writeln!(f, "constant_c: {}", self.constant_c)?;
        writeln!(f, "constant_difference: {}", self.constant_difference)?;
        writeln!(f, "delta_achieved: {}", self.delta_achieved)?;
        writeln!(f, "precision_met: {}", self.precision_met)?;
        write!(f, "alpha_bound_active: {}", self.alpha_bound_active)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn theta_values() {
        assert!((near_optimality_factor(0.05).unwrap() - 4.584_059).abs() < 1e-6);
        assert!((near_optimality_factor(0.1).unwrap() - 6.538_825).abs() < 1e-6);
        assert!(near_optimality_factor(0.25).is_none());
    }
}
