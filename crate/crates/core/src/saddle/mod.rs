//! The saddle value 2Φ*(r) as a one-dimensional convex minimization over
//! alpha of Ψ(α) = 2αr + max over X × X of the coupled objective.

pub mod frank_wolfe;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densities::DensityError;
use crate::geometry::{dot, ExtremePoints, GeometryError};
use crate::model::ProblemSpec;

pub use frank_wolfe::{maximize, ActiveSet, ConcaveObjective, FwOutcome, ProductSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("channel parameter error: {0}")]
    Density(#[from] DensityError),
    #[error("feasible set error: {0}")]
    Geometry(#[from] GeometryError),
    #[error("objective is not concave along the search direction: value {value} exceeds tangent bound {tangent_bound}")]
    NonConcave { value: f64, tangent_bound: f64 },
    #[error("certificate violated: {0}")]
    Certificate(String),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

/// h_α(x, y) = gᵀ(x − y) + 2α Σ_l R_l ln AffH_l(A_l x, A_l y).
pub fn coupled_objective(spec: &ProblemSpec, alpha: f64, x: &[f64], y: &[f64]) -> Result<f64, SolveError> {
    let lin = dot(&spec.g, x) - dot(&spec.g, y);
    Ok(lin + 2.0 * alpha * log_affinity_sum(spec, x, y)?)
}

/// Σ_l R_l ln AffH_l(A_l x, A_l y).
pub fn log_affinity_sum(spec: &ProblemSpec, x: &[f64], y: &[f64]) -> Result<f64, SolveError> {
    let mut total = 0.0;
    for ch in &spec.channels {
        total += f64::from(ch.repetitions) * ch.family.log_affinity(&ch.apply(x), &ch.apply(y))?;
    }
    Ok(total)
}

/// Gradients of [`coupled_objective`] with respect to x and y.
pub fn coupled_gradient(
    spec: &ProblemSpec,
    alpha: f64,
    x: &[f64],
    y: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), SolveError> {
    let mut gx = spec.g.clone();
    let mut gy: Vec<f64> = spec.g.iter().map(|v| -v).collect();
    for ch in &spec.channels {
        let (dmu, dnu) = ch.family.log_affinity_grad(&ch.apply(x), &ch.apply(y))?;
        let w = 2.0 * alpha * f64::from(ch.repetitions);
        for (o, v) in gx.iter_mut().zip(ch.apply_transpose(&dmu)) {
            *o += w * v;
        }
        for (o, v) in gy.iter_mut().zip(ch.apply_transpose(&dnu)) {
            *o += w * v;
        }
    }
    Ok((gx, gy))
}

/// The coupled objective on the stacked variable z = (x, y).
pub struct CoupledObjective<'a> {
    pub spec: &'a ProblemSpec,
    pub alpha: f64,
}

impl ConcaveObjective for CoupledObjective<'_> {
    fn value(&self, z: &[f64]) -> Result<f64, SolveError> {
        let (x, y) = z.split_at(self.spec.dim());
        coupled_objective(self.spec, self.alpha, x, y)
    }

    fn gradient(&self, z: &[f64]) -> Result<Vec<f64>, SolveError> {
        let (x, y) = z.split_at(self.spec.dim());
        let (mut gx, gy) = coupled_gradient(self.spec, self.alpha, x, y)?;
        gx.extend(gy);
        Ok(gx)
    }

    fn scale(&self) -> f64 {
        objective_scale(self.spec, self.alpha)
    }
}

/// Rough magnitude of the terms in h_α, used for roundoff allowances.
pub(crate) fn objective_scale(spec: &ProblemSpec, alpha: f64) -> f64 {
    let reach = match spec.feasible_set.extreme_points() {
        ExtremePoints::Vertices(vs) => vs
            .iter()
            .map(|v| spec.g.iter().zip(v).map(|(g, c)| (g * c).abs()).sum::<f64>())
            .fold(0.0, f64::max),
        ExtremePoints::BoxBounds { lower, upper } => spec
            .g
            .iter()
            .zip(lower.iter().zip(&upper))
            .map(|(g, (l, u))| g.abs() * l.abs().max(u.abs()))
            .sum(),
    };
    let reps: f64 = spec.channels.iter().map(|c| f64::from(c.repetitions)).sum();
    2.0 * reach + 2.0 * alpha * reps
}

/// Approximate maximizer of h_α over X × X with its Frank-Wolfe certificate.
#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub x_star: Vec<f64>,
    pub y_star: Vec<f64>,
    /// h_α at (x_star, y_star).
    pub value: f64,
    /// `value + fw_gap` bounds the true maximum from above.
    pub fw_gap: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Final active set, reused to warm-start nearby solves.
    pub active: ActiveSet,
}

impl InnerSolution {
    pub fn upper(&self) -> f64 {
        self.value + self.fw_gap
    }
}

/// The cold start: the pair of extreme points maximizing gᵀx and −gᵀy.
pub fn cold_start(spec: &ProblemSpec) -> Result<ActiveSet, SolveError> {
    let neg: Vec<f64> = spec.g.iter().map(|v| -v).collect();
    let mut z = spec.feasible_set.lmo(&spec.g)?;
    z.extend(spec.feasible_set.lmo(&neg)?);
    Ok(ActiveSet::single(z))
}

pub fn maximize_inner(spec: &ProblemSpec, alpha: f64, tol: f64, max_iter: usize) -> Result<InnerSolution, SolveError> {
    maximize_inner_from(spec, alpha, tol, max_iter, cold_start(spec)?)
}

pub fn maximize_inner_from(
    spec: &ProblemSpec,
    alpha: f64,
    tol: f64,
    max_iter: usize,
    start: ActiveSet,
) -> Result<InnerSolution, SolveError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(SolveError::InvalidProblem(format!("alpha must be positive, got {alpha}")));
    }
    let obj = CoupledObjective { spec, alpha };
    let set = ProductSet { set: &spec.feasible_set, blocks: 2 };
    let out = maximize(&obj, set, start, tol, max_iter)?;
    let n = spec.dim();
    let slack = 1e-10 * (1.0 + obj.scale());
    if out.value + out.gap < -slack {
        return Err(SolveError::Certificate(format!(
            "inner maximum bound {} is negative although x = y is feasible",
            out.value + out.gap
        )));
    }
    Ok(InnerSolution {
        x_star: out.point[..n].to_vec(),
        y_star: out.point[n..].to_vec(),
        value: out.value,
        fw_gap: out.gap,
        iterations: out.iterations,
        converged: out.converged,
        active: out.active,
    })
}

/// Certified bracket on Ψ(α) = 2αr + max h_α.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiBracket {
    pub alpha: f64,
    pub psi_lower: f64,
    pub psi_upper: f64,
}

fn bracket(spec: &ProblemSpec, alpha: f64, inner: &InnerSolution) -> PsiBracket {
    let base = 2.0 * alpha * spec.r();
    // the inner maximum is at least 0 (take x = y)
    PsiBracket { alpha, psi_lower: base + inner.value.max(0.0), psi_upper: base + inner.upper().max(0.0) }
}

pub fn psi(spec: &ProblemSpec, alpha: f64) -> Result<(f64, f64, InnerSolution), SolveError> {
    let s = &spec.solver;
    let inner = maximize_inner(spec, alpha, s.tol_inner, s.max_iter_inner)?;
    let b = bracket(spec, alpha, &inner);
    Ok((b.psi_lower, b.psi_upper, inner))
}

#[derive(Debug, Clone)]
pub struct SaddleSolution {
    pub alpha_star: f64,
    pub inner: InnerSolution,
    pub psi_lower: f64,
    pub psi_upper: f64,
    pub r: f64,
    /// Every alpha evaluated, in order.
    pub trace: Vec<PsiBracket>,
    /// Certified lower bound on min Ψ over the alpha range.
    pub value_lower_bound: f64,
    /// `psi_upper - value_lower_bound`.
    pub delta_solver: f64,
    pub alpha_bound_active: bool,
    pub precision_met: bool,
}

impl SaddleSolution {
    /// Upper estimate of 2Φ*.
    pub fn saddle_value(&self) -> f64 {
        self.psi_upper
    }
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section search for the minimizer of Ψ on ln α.
pub fn minimize_alpha(spec: &ProblemSpec) -> Result<SaddleSolution, SolveError> {
    let s = &spec.solver;
    let (lo, hi) = (s.alpha_min.ln(), s.alpha_max.ln());
    let stop = (1.0 + s.tol_alpha).ln();

    let mut trace = Vec::new();
    let mut minorants = vec![(0.0, 2.0 * spec.r())];
    let mut best: Option<(PsiBracket, InnerSolution)> = None;
    let mut warm = cold_start(spec)?;

    let mut eval = |alpha: f64, warm: &mut ActiveSet| -> Result<f64, SolveError> {
        let inner = maximize_inner_from(spec, alpha, s.tol_inner, s.max_iter_inner, warm.clone())?;
        let b = bracket(spec, alpha, &inner);
        let (x, y) = (&inner.x_star, &inner.y_star);
        minorants.push((
            dot(&spec.g, x) - dot(&spec.g, y),
            2.0 * spec.r() + 2.0 * log_affinity_sum(spec, x, y)?,
        ));
        trace.push(b);
        *warm = inner.active.clone();
        if best.as_ref().is_none_or(|(bb, _)| b.psi_upper < bb.psi_upper) {
            best = Some((b, inner));
        }
        Ok(b.psi_upper)
    };

    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = eval(c.exp(), &mut warm)?;
    let mut fd = eval(d.exp(), &mut warm)?;
    while b - a > stop {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = eval(c.exp(), &mut warm)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = eval(d.exp(), &mut warm)?;
        }
    }
    let at_lo = a == lo;
    let at_hi = b == hi;
    if at_lo {
        eval(s.alpha_min, &mut warm)?;
    }
    if at_hi {
        eval(s.alpha_max, &mut warm)?;
    }
    drop(eval);

    let (b_star, inner) = best.expect("at least two evaluations");
    let alpha_bound_active = b_star.alpha == s.alpha_min || b_star.alpha == s.alpha_max;
    let value_lower_bound = cutting_plane_bound(&minorants, s.alpha_min, s.alpha_max).min(b_star.psi_upper);
    let delta_solver = b_star.psi_upper - value_lower_bound;
    Ok(SaddleSolution {
        alpha_star: b_star.alpha,
        inner,
        psi_lower: b_star.psi_lower,
        psi_upper: b_star.psi_upper,
        r: spec.r(),
        trace,
        value_lower_bound,
        delta_solver,
        alpha_bound_active,
        precision_met: delta_solver <= spec.delta,
    })
}

/// min over α in [lo, hi] of max_k (c_k + s_k α).
///
/// Each line is Ψ's minorant α ↦ 2αr + h_α(x_k, y_k) for an evaluated
/// pair, so the result is a certified lower bound on min Ψ. The minimum of
/// a piecewise-linear convex function sits at an endpoint or a crossing.
fn cutting_plane_bound(lines: &[(f64, f64)], lo: f64, hi: f64) -> f64 {
    let upper = |a: f64| lines.iter().map(|(c, s)| c + s * a).fold(f64::NEG_INFINITY, f64::max);
    let mut best = upper(lo).min(upper(hi));
    for (i, (c1, s1)) in lines.iter().enumerate() {
        for (c2, s2) in &lines[i + 1..] {
            if s1 != s2 {
                let a = (c2 - c1) / (s1 - s2);
                if a > lo && a < hi {
                    best = best.min(upper(a));
                }
            }
        }
    }
    best
}
