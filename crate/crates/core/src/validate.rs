//! Independent checks of a built estimator: Monte Carlo coverage, a
//! brute-force grid oracle for the saddle value, finite-difference gradient
//! checks and the algebraic identities a saddle point must satisfy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densities::{log_ratio_unchecked, sample_unchecked, DensityError, FamilyKind};
use crate::estimator::AffineEstimator;
use crate::geometry::{dot, FeasibleSet};
use crate::model::{ConstantMode, ProblemSpec};
use crate::saddle::{coupled_gradient, coupled_objective, SolveError};

pub const MIN_MC_SAMPLES: usize = 10_000;
pub const MIN_GRID_POINTS: usize = 101;
pub const MAX_GRID_DIM: usize = 3;
pub const DEFAULT_WORKERS: usize = 8;
const PROBE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValidateError {
    #[error("probe {index} is outside the feasible set")]
    ProbeOutside { index: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("grid oracle needs at most {MAX_GRID_DIM} free dimensions, the feasible set has {0}")]
    GridTooLarge(usize),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub state: Vec<f64>,
    pub n_samples: usize,
    pub misses: u64,
    pub miss_rate: f64,
    /// Three binomial standard deviations at rate epsilon.
    pub mc_half_width: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub probes: Vec<ProbeResult>,
    pub epsilon: f64,
    pub risk: f64,
    pub seed: u64,
    pub workers: usize,
    pub pass: bool,
}

/// x*, y* and `random` states drawn from X with a seeded generator.
pub fn default_probes(spec: &ProblemSpec, est: &AffineEstimator, random: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // keep these draws apart from the sampling streams
    rng.set_stream(u64::MAX);
    let mut out = vec![est.provenance.x_star.clone(), est.provenance.y_star.clone()];
    out.extend((0..random).map(|_| spec.feasible_set.random_point(&mut rng)));
    out
}

/// Draws `n_samples` full observation sets at each probe and counts how
/// often the estimate misses gᵀx by at least the certified risk.
///
/// The samples of probe p are split over `workers` chunks; chunk w uses
/// ChaCha stream `p * workers + w`, so results depend only on the seed and
/// the worker count.
pub fn coverage_mc(
    spec: &ProblemSpec,
    est: &AffineEstimator,
    probes: &[Vec<f64>],
    n_samples: usize,
    seed: u64,
    workers: usize,
) -> Result<CoverageReport, ValidateError> {
    if n_samples < MIN_MC_SAMPLES {
        return Err(ValidateError::InvalidArgument(format!(
            "n_samples must be at least {MIN_MC_SAMPLES}, got {n_samples}"
        )));
    }
    if workers == 0 {
        return Err(ValidateError::InvalidArgument("workers must be at least 1".into()));
    }
    if est.channels.len() != spec.channels.len() {
        return Err(ValidateError::InvalidArgument(format!(
            "estimator has {} channels, problem has {}",
            est.channels.len(),
            spec.channels.len()
        )));
    }
    let mut params = Vec::with_capacity(probes.len());
    for (index, x) in probes.iter().enumerate() {
        if !spec.feasible_set.contains(x, PROBE_TOL) {
            return Err(ValidateError::ProbeOutside { index });
        }
        let mut lambdas = Vec::with_capacity(spec.channels.len());
        for (ch, ech) in spec.channels.iter().zip(&est.channels) {
            let lambda = ch.apply(x);
            ch.family.check_param(&lambda)?;
            ech.family.check_param(&ech.mu_star)?;
            ech.family.check_param(&ech.nu_star)?;
            lambdas.push(lambda);
        }
        params.push((dot(&spec.g, x), lambdas));
    }

    let jobs: Vec<(usize, usize)> = (0..probes.len()).flat_map(|p| (0..workers).map(move |w| (p, w))).collect();
    let counts: Vec<u64> = jobs
        .par_iter()
        .map(|&(p, w)| {
            let n = n_samples / workers + usize::from(w < n_samples % workers);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((p * workers + w) as u64);
            let (truth, lambdas) = &params[p];
            count_misses(est, lambdas, *truth, n, &mut rng)
        })
        .collect();

    let eps = est.epsilon;
    let probes: Vec<ProbeResult> = probes
        .iter()
        .enumerate()
        .map(|(p, x)| {
            let misses: u64 = counts[p * workers..(p + 1) * workers].iter().sum();
            let miss_rate = misses as f64 / n_samples as f64;
            let mc_half_width = 3.0 * (eps * (1.0 - eps) / n_samples as f64).sqrt();
            ProbeResult {
                state: x.clone(),
                n_samples,
                misses,
                miss_rate,
                mc_half_width,
                pass: miss_rate <= eps + mc_half_width,
            }
        })
        .collect();
    let pass = probes.iter().all(|p| p.pass);
    Ok(CoverageReport { probes, epsilon: eps, risk: est.risk, seed, workers, pass })
}

fn count_misses<R: Rng>(est: &AffineEstimator, lambdas: &[Vec<f64>], truth: f64, n: usize, rng: &mut R) -> u64 {
    let half = 0.5 * est.alpha;
    let mut misses = 0;
    for _ in 0..n {
        let mut phi = 0.0;
        for (ch, lambda) in est.channels.iter().zip(lambdas) {
            for _ in 0..ch.repetitions {
                let omega = sample_unchecked(&ch.family, lambda, rng);
                phi += log_ratio_unchecked(&ch.family, &ch.mu_star, &ch.nu_star, &omega);
            }
        }
        let estimate = est.constant_c + half * phi;
        // a deviation equal to the risk already counts as a miss
        if (estimate - truth).abs() >= est.risk {
            misses += 1;
        }
    }
    misses
}

/// Coordinates of X as an image of a low-dimensional grid domain.
enum Chart<'a> {
    /// Free box coordinates; fixed ones are copied from `lower`.
    Box { lower: &'a [f64], upper: &'a [f64], free: Vec<usize> },
    /// Barycentric weights on `vertices`.
    Hull { vertices: Vec<Vec<f64>> },
}

impl Chart<'_> {
    fn new(set: &FeasibleSet) -> Chart<'_> {
        match set {
            FeasibleSet::Box { lower, upper } => {
                let free = (0..lower.len()).filter(|&i| upper[i] > lower[i]).collect();
                Chart::Box { lower, upper, free }
            }
            FeasibleSet::Simplex { dim, floor, total } => Chart::Hull {
                vertices: (0..*dim)
                    .map(|j| {
                        let mut v = vec![*floor; *dim];
                        v[j] = total - (*dim as f64 - 1.0) * floor;
                        v
                    })
                    .collect(),
            },
            FeasibleSet::Polytope { vertices } => Chart::Hull { vertices: vertices.clone() },
        }
    }

    fn free_dims(&self) -> usize {
        match self {
            Chart::Box { free, .. } => free.len(),
            Chart::Hull { vertices } => vertices.len() - 1,
        }
    }

    /// All grid states with `m` points per free dimension.
    fn points(&self, m: usize) -> Vec<Vec<f64>> {
        let step = 1.0 / (m - 1) as f64;
        let d = self.free_dims();
        let mut out = Vec::new();
        let mut idx = vec![0usize; d];
        loop {
            let t: Vec<f64> = idx.iter().map(|&i| i as f64 * step).collect();
            match self {
                Chart::Box { lower, upper, free } => {
                    let mut x = lower.to_vec();
                    for (k, &i) in free.iter().enumerate() {
                        x[i] = lower[i] + t[k] * (upper[i] - lower[i]);
                    }
                    out.push(x);
                }
                Chart::Hull { vertices } => {
                    let used: usize = idx.iter().sum();
                    if used < m {
                        let mut w: Vec<f64> = t.clone();
                        w.push(1.0 - (used as f64) * step);
                        let mut x = vec![0.0; vertices[0].len()];
                        for (v, wi) in vertices.iter().zip(&w) {
                            for (xi, vi) in x.iter_mut().zip(v) {
                                *xi += wi * vi;
                            }
                        }
                        out.push(x);
                    }
                }
            }
            let mut k = 0;
            loop {
                if k == d {
                    return out;
                }
                idx[k] += 1;
                if idx[k] < m {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }
}

/// ln AffH written out per family, separately from the library's closed forms.
fn grid_log_affinity(family: &FamilyKind, mu: &[f64], nu: &[f64]) -> f64 {
    match family {
        FamilyKind::Discrete { .. } => mu.iter().zip(nu).map(|(a, b)| (a * b).sqrt()).sum::<f64>().ln(),
        FamilyKind::PoissonVec { .. } => mu.iter().zip(nu).map(|(a, b)| (a * b).sqrt() - 0.5 * (a + b)).sum(),
        FamilyKind::GaussianVec { sigmas, .. } => {
            -mu.iter().zip(nu).zip(sigmas).map(|((a, b), s)| ((a - b) / s).powi(2)).sum::<f64>() / 8.0
        }
    }
}

fn affine(matrix: &[Vec<f64>], offset: &[f64], x: &[f64]) -> Vec<f64> {
    matrix
        .iter()
        .zip(offset)
        .map(|(row, b)| row.iter().zip(x).fold(*b, |acc, (a, xi)| acc + a * xi))
        .collect()
}

/// max gᵀ(x − y) subject to Σ_l R_l ln AffH_l(A_l x, A_l y) ≥ −r, by
/// exhaustive search over grid pairs in X × X. Only the grid points of
/// X are visited, so the value is a lower estimate accurate to the grid
/// resolution of gᵀ(x − y).
pub fn dual_value_oracle(spec: &ProblemSpec, r: f64, grid_points_per_dim: usize) -> Result<f64, ValidateError> {
    if grid_points_per_dim < MIN_GRID_POINTS {
        return Err(ValidateError::InvalidArgument(format!(
            "grid_points_per_dim must be at least {MIN_GRID_POINTS}"
        )));
    }
    let chart = Chart::new(&spec.feasible_set);
    if chart.free_dims() > MAX_GRID_DIM {
        return Err(ValidateError::GridTooLarge(chart.free_dims()));
    }
    let points: Vec<(f64, Vec<Vec<f64>>)> = chart
        .points(grid_points_per_dim)
        .into_iter()
        .map(|x| {
            let gx = spec.g.iter().zip(&x).map(|(a, b)| a * b).sum();
            let params = spec.channels.iter().map(|ch| affine(&ch.map_matrix, &ch.map_offset, &x)).collect();
            (gx, params)
        })
        .collect();

    let feasible = |p: &[Vec<f64>], q: &[Vec<f64>]| {
        let total: f64 = spec
            .channels
            .iter()
            .zip(p.iter().zip(q))
            .map(|(ch, (a, b))| ch.repetitions as f64 * grid_log_affinity(&ch.family, a, b))
            .sum();
        total >= -r
    };
    let best = points
        .par_iter()
        .map(|(gx, px)| {
            let mut best = 0.0f64;
            for (gy, py) in &points {
                let v = gx - gy;
                if v > best && feasible(px, py) {
                    best = v;
                }
            }
            best
        })
        .reduce(|| 0.0, f64::max);
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    /// Relative central-difference step (absolute where a coordinate is 0).
    pub step: f64,
    /// When set, every family-level test parameter has a coordinate this
    /// close to the domain boundary.
    pub boundary_margin: Option<f64>,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions { step: 1e-6, boundary_margin: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdCheck {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdReport {
    pub checks: Vec<FdCheck>,
    pub max_rel_error: f64,
}

fn central_diff(f: &dyn Fn(&[f64]) -> f64, z: &[f64], step: f64) -> Vec<f64> {
    (0..z.len())
        .map(|i| {
            let h = if z[i] == 0.0 { step } else { step * z[i].abs() };
            let mut p = z.to_vec();
            let mut m = z.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn rel_error(fd: &[f64], an: &[f64]) -> f64 {
    let diff = fd.iter().zip(an).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let norm = an.iter().map(|v| v.abs()).fold(0.0, f64::max);
    diff / norm.max(1.0)
}

fn near_boundary(family: &FamilyKind, mu: &mut [f64], margin: f64) {
    match family {
        FamilyKind::Discrete { .. } => {
            // move mass from coordinate 0 to the others, staying on the simplex
            let rest: f64 = mu[1..].iter().sum();
            let scale = (1.0 - margin) / rest;
            mu[1..].iter_mut().for_each(|v| *v *= scale);
            mu[0] = margin;
        }
        FamilyKind::PoissonVec { .. } => mu[0] = margin,
        FamilyKind::GaussianVec { .. } => {}
    }
}

/// Worst relative error of every analytic gradient against central
/// differences at `n_points` random interior points.
pub fn finite_diff_suite(spec: &ProblemSpec, n_points: usize, seed: u64) -> Result<FdReport, ValidateError> {
    finite_diff_suite_with(spec, n_points, seed, FdOptions::default())
}

pub fn finite_diff_suite_with(
    spec: &ProblemSpec,
    n_points: usize,
    seed: u64,
    opts: FdOptions,
) -> Result<FdReport, ValidateError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let mut record = |name: String, err: f64| match checks.iter_mut().find(|c: &&mut FdCheck| c.name == name) {
        Some(c) => c.max_rel_error = c.max_rel_error.max(err),
        None => checks.push(FdCheck { name, max_rel_error: err }),
    };
    let step = opts.step;

    for _ in 0..n_points {
        let x = spec.feasible_set.random_point(&mut rng);
        let y = spec.feasible_set.random_point(&mut rng);
        let z = spec.feasible_set.random_point(&mut rng);
        for (l, ch) in spec.channels.iter().enumerate() {
            let fam = &ch.family;
            let (mut mu, mut nu, mut lambda) = (ch.apply(&x), ch.apply(&y), ch.apply(&z));
            if let Some(m) = opts.boundary_margin {
                near_boundary(fam, &mut mu, m);
                near_boundary(fam, &mut nu, m);
                near_boundary(fam, &mut lambda, m);
            }
            let (dmu, dnu) = fam.log_affinity_grad(&mu, &nu)?;
            let f_mu = |p: &[f64]| fam.log_affinity(p, &nu).unwrap_or(f64::NAN);
            record(format!("channel {l}: affinity d/dmu"), rel_error(&central_diff(&f_mu, &mu, step), &dmu));
            let f_nu = |p: &[f64]| fam.log_affinity(&mu, p).unwrap_or(f64::NAN);
            record(format!("channel {l}: affinity d/dnu"), rel_error(&central_diff(&f_nu, &nu, step), &dnu));
            let dl = fam.tilted_affinity_grad(&lambda, &mu, &nu)?;
            let f_l = |p: &[f64]| fam.tilted_affinity_log(p, &mu, &nu).unwrap_or(f64::NAN);
            record(format!("channel {l}: tilted affinity d/dlambda"), rel_error(&central_diff(&f_l, &lambda, step), &dl));
        }
        let alpha = 10f64.powf(rng.random_range(-2.0..2.0));
        let (gx, gy) = coupled_gradient(spec, alpha, &x, &y)?;
        let fx = |p: &[f64]| coupled_objective(spec, alpha, p, &y).unwrap_or(f64::NAN);
        record("coupled objective d/dx".into(), rel_error(&central_diff(&fx, &x, step), &gx));
        let fy = |p: &[f64]| coupled_objective(spec, alpha, &x, p).unwrap_or(f64::NAN);
        record("coupled objective d/dy".into(), rel_error(&central_diff(&fy, &y, step), &gy));
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(FdReport { checks, max_rel_error })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, residual: f64, tolerance: f64) -> Self {
        CheckResult { name: name.into(), residual, tolerance, pass: residual <= tolerance }
    }
}

pub const EQUAL_INTEGRALS_TOL: f64 = 1e-12;

/// The identities a built estimator satisfies at its saddle point, each
/// with its residual and the tolerance implied by the stored certificates.
pub fn consistency_suite(spec: &ProblemSpec, est: &AffineEstimator) -> Result<Vec<CheckResult>, ValidateError> {
    let prov = &est.provenance;
    let (x, y) = (&prov.x_star, &prov.y_star);
    let mut out = Vec::new();

    for (l, (ch, ech)) in spec.channels.iter().zip(&est.channels).enumerate() {
        let fam = &ech.family;
        let margin = fam.domain_margin(&ech.mu_star).min(fam.domain_margin(&ech.nu_star));
        out.push(CheckResult::new(
            format!("channel {l}: parameters inside domain"),
            if margin > 0.0 { 0.0 } else { -margin },
            0.0,
        ));
        if margin <= 0.0 {
            continue;
        }
        let (ax, ay) = (ch.apply(x), ch.apply(y));
        let log_aff = fam.log_affinity(&ax, &ay)?;
        let tx = fam.tilted_affinity_log(&ax, &ech.mu_star, &ech.nu_star)?;
        let ty = fam.tilted_affinity_log(&ay, &ech.nu_star, &ech.mu_star)?;
        out.push(CheckResult::new(
            format!("channel {l}: equal integrals (x side)"),
            (tx - log_aff).abs(),
            EQUAL_INTEGRALS_TOL,
        ));
        out.push(CheckResult::new(
            format!("channel {l}: equal integrals (y side)"),
            (ty - log_aff).abs(),
            EQUAL_INTEGRALS_TOL,
        ));
    }

    let gaps = prov.inner_gap + prov.certify_gaps[0] + prov.certify_gaps[1];
    out.push(CheckResult::new(
        "constant identity",
        (prov.constant_certified - prov.constant_closed_form).abs(),
        0.5 * gaps + 1e-9,
    ));
    let risk_slack = match prov.constant_mode {
        ConstantMode::Certified => 0.5 * gaps,
        ConstantMode::ClosedForm => gaps,
    };
    out.push(CheckResult::new(
        "risk matches half the saddle value",
        (est.risk - 0.5 * prov.psi_upper).abs(),
        risk_slack + 1e-10,
    ));
    let r = (2.0 / est.epsilon).ln();
    out.push(CheckResult::new("risk at least alpha * r", (est.alpha * r - est.risk).max(0.0), 0.0));
    Ok(out)
}
