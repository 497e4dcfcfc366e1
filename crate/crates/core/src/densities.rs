//! Parametric density families and their Hellinger affinities.
//!
//! Every family here is a product of independent scalar components (or a
//! single categorical draw), so the affinity, the tilted affinity and their
//! gradients all have exact closed forms. [`FamilyKind::affinity_oracle`]
//! recomputes the affinity by brute-force summation / quadrature and is kept
//! free of the closed forms so tests can cross-check the two.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensityError {
    #[error("parameter has dimension {found}, family expects {expected}")]
    ParamDimension { expected: usize, found: usize },
    #[error("parameter outside the family domain: {0}")]
    Domain(String),
    #[error("invalid outcome: {0}")]
    Outcome(String),
    #[error("oracle did not converge: {0}")]
    OracleNonConvergence(String),
}

pub type Result<T> = std::result::Result<T, DensityError>;

/// The supported observation families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FamilyKind {
    /// One categorical draw over `n_outcomes` cells; parameter is the
    /// probability vector (relatively open simplex).
    Discrete { n_outcomes: usize },
    /// `dim` independent Poisson counts; parameter is the rate vector.
    #[serde(rename = "poisson")]
    PoissonVec { dim: usize },
    /// `dim` independent normals with known standard deviations; parameter
    /// is the mean vector.
    #[serde(rename = "gaussian")]
    GaussianVec { dim: usize, sigmas: Vec<f64> },
}

/// A single observation drawn from a family.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Outcome {
    Index(usize),
    Counts(Vec<u64>),
    Real(Vec<f64>),
}

impl FamilyKind {
    /// Checks the family description itself (not a parameter).
    pub fn check(&self) -> std::result::Result<(), String> {
        match self {
            FamilyKind::Discrete { n_outcomes } if *n_outcomes < 2 => {
                Err(format!("discrete family needs n_outcomes >= 2, got {n_outcomes}"))
            }
            FamilyKind::PoissonVec { dim } if *dim < 1 => {
                Err("poisson family needs dim >= 1".to_string())
            }
            FamilyKind::GaussianVec { dim, sigmas } => {
                if *dim < 1 {
                    return Err("gaussian family needs dim >= 1".to_string());
                }
                if sigmas.len() != *dim {
                    return Err(format!(
                        "gaussian family has dim {dim} but {} sigmas",
                        sigmas.len()
                    ));
                }
                if let Some(s) = sigmas.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
                    return Err(format!("gaussian sigma must be positive and finite, got {s}"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Length of the parameter vector.
    pub fn param_dim(&self) -> usize {
        match self {
            FamilyKind::Discrete { n_outcomes } => *n_outcomes,
            FamilyKind::PoissonVec { dim } | FamilyKind::GaussianVec { dim, .. } => *dim,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FamilyKind::Discrete { .. } => "discrete",
            FamilyKind::PoissonVec { .. } => "poisson",
            FamilyKind::GaussianVec { .. } => "gaussian",
        }
    }

    /// How far `mu` sits inside the open domain. Discrete and Poisson use
    /// the smallest coordinate; the Gaussian domain is all of R^dim.
    ///
    /// The discrete sum-to-one constraint is not part of this number; model
    /// validation checks it separately.
    pub fn domain_margin(&self, mu: &[f64]) -> f64 {
        match self {
            FamilyKind::Discrete { .. } | FamilyKind::PoissonVec { .. } => {
                mu.iter().copied().fold(f64::INFINITY, f64::min)
            }
            FamilyKind::GaussianVec { .. } => f64::INFINITY,
        }
    }

    /// Dimension, finiteness and positivity. Discrete parameters are checked
    /// on the positive orthant so that coordinate-wise finite differences
    /// stay in the domain; the simplex constraint is enforced at model level.
    pub fn check_param(&self, mu: &[f64]) -> Result<()> {
        if mu.len() != self.param_dim() {
            return Err(DensityError::ParamDimension {
                expected: self.param_dim(),
                found: mu.len(),
            });
        }
        if let Some(v) = mu.iter().find(|v| !v.is_finite()) {
            return Err(DensityError::Domain(format!("non-finite coordinate {v}")));
        }
        match self {
            FamilyKind::Discrete { .. } | FamilyKind::PoissonVec { .. } => {
                if let Some((i, v)) = mu.iter().enumerate().find(|(_, v)| **v <= 0.0) {
                    return Err(DensityError::Domain(format!(
                        "{} parameter coordinate {i} is {v}, must be > 0",
                        self.name()
                    )));
                }
                Ok(())
            }
            FamilyKind::GaussianVec { .. } => Ok(()),
        }
    }

    fn sigmas(&self) -> &[f64] {
        match self {
            FamilyKind::GaussianVec { sigmas, .. } => sigmas,
            _ => &[],
        }
    }

    pub fn check_outcome(&self, omega: &Outcome) -> Result<()> {
        match (self, omega) {
            (FamilyKind::Discrete { n_outcomes }, Outcome::Index(i)) => {
                if i < n_outcomes {
                    Ok(())
                } else {
                    Err(DensityError::Outcome(format!(
                        "index {i} out of range for {n_outcomes} outcomes"
                    )))
                }
            }
            (FamilyKind::PoissonVec { dim }, Outcome::Counts(k)) if k.len() == *dim => Ok(()),
            (FamilyKind::GaussianVec { dim, .. }, Outcome::Real(w)) if w.len() == *dim => {
                if w.iter().all(|v| v.is_finite()) {
                    Ok(())
                } else {
                    Err(DensityError::Outcome("non-finite gaussian outcome".to_string()))
                }
            }
            _ => Err(DensityError::Outcome(format!(
                "{omega:?} does not match the {} family of dimension {}",
                self.name(),
                self.param_dim()
            ))),
        }
    }

    /// Decodes an outcome from its JSON encoding (integer index, integer
    /// vector, or real vector depending on the family).
    pub fn outcome_from_json(&self, value: &Value) -> Result<Outcome> {
        let bad = || DensityError::Outcome(format!("cannot read {value} as a {} outcome", self.name()));
        let omega = match self {
            FamilyKind::Discrete { .. } => Outcome::Index(
                value.as_u64().ok_or_else(bad)?.try_into().map_err(|_| bad())?,
            ),
            FamilyKind::PoissonVec { .. } => Outcome::Counts(
                value
                    .as_array()
                    .ok_or_else(bad)?
                    .iter()
                    .map(|v| v.as_u64().ok_or_else(bad))
                    .collect::<Result<_>>()?,
            ),
            FamilyKind::GaussianVec { .. } => Outcome::Real(
                value
                    .as_array()
                    .ok_or_else(bad)?
                    .iter()
                    .map(|v| v.as_f64().ok_or_else(bad))
                    .collect::<Result<_>>()?,
            ),
        };
        self.check_outcome(&omega)?;
        Ok(omega)
    }

    /// ln p_mu(omega).
    pub fn log_density(&self, mu: &[f64], omega: &Outcome) -> Result<f64> {
        self.check_param(mu)?;
        self.check_outcome(omega)?;
        Ok(match omega {
            Outcome::Index(i) => mu[*i].ln(),
            Outcome::Counts(k) => k
                .iter()
                .zip(mu)
                .map(|(&k, &m)| {
                    let k = k as f64;
                    k * m.ln() - m - ln_gamma(k + 1.0)
                })
                .sum(),
            Outcome::Real(w) => w
                .iter()
                .zip(mu)
                .zip(self.sigmas())
                .map(|((&w, &m), &s)| {
                    let z = (w - m) / s;
                    -LN_SQRT_2PI - s.ln() - 0.5 * z * z
                })
                .sum(),
        })
    }

    /// ln p_mu(omega) - ln p_nu(omega), with normalizing terms cancelled.
    pub fn log_density_ratio(&self, mu: &[f64], nu: &[f64], omega: &Outcome) -> Result<f64> {
        self.check_param(mu)?;
        self.check_param(nu)?;
        self.check_outcome(omega)?;
        Ok(log_ratio_unchecked(self, mu, nu, omega))
    }

    /// Hellinger affinity, i.e. the Bhattacharyya coefficient.
    pub fn affinity(&self, mu: &[f64], nu: &[f64]) -> Result<f64> {
        Ok(self.log_affinity(mu, nu)?.exp())
    }

    /// ln AffH(mu, nu), computed in log space for the product families.
    pub fn log_affinity(&self, mu: &[f64], nu: &[f64]) -> Result<f64> {
        self.check_param(mu)?;
        self.check_param(nu)?;
        Ok(match self {
            FamilyKind::Discrete { .. } => {
                mu.iter().zip(nu).map(|(m, n)| (m * n).sqrt()).sum::<f64>().ln()
            }
            FamilyKind::PoissonVec { .. } => {
                -0.5 * mu
                    .iter()
                    .zip(nu)
                    .map(|(m, n)| (m.sqrt() - n.sqrt()).powi(2))
                    .sum::<f64>()
            }
            FamilyKind::GaussianVec { sigmas, .. } => -mu
                .iter()
                .zip(nu)
                .zip(sigmas)
                .map(|((m, n), s)| (m - n).powi(2) / (8.0 * s * s))
                .sum::<f64>(),
        })
    }

    /// Gradients of ln AffH with respect to `mu` and to `nu`.
    pub fn log_affinity_grad(&self, mu: &[f64], nu: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_param(mu)?;
        self.check_param(nu)?;
        Ok(match self {
            FamilyKind::Discrete { .. } => {
                let aff: f64 = mu.iter().zip(nu).map(|(m, n)| (m * n).sqrt()).sum();
                let gm = mu.iter().zip(nu).map(|(m, n)| (n / m).sqrt() / (2.0 * aff)).collect();
                let gn = mu.iter().zip(nu).map(|(m, n)| (m / n).sqrt() / (2.0 * aff)).collect();
                (gm, gn)
            }
            FamilyKind::PoissonVec { .. } => {
                let gm = mu.iter().zip(nu).map(|(m, n)| -0.5 * (1.0 - (n / m).sqrt())).collect();
                let gn = mu.iter().zip(nu).map(|(m, n)| -0.5 * (1.0 - (m / n).sqrt())).collect();
                (gm, gn)
            }
            FamilyKind::GaussianVec { sigmas, .. } => {
                let gm: Vec<f64> = mu
                    .iter()
                    .zip(nu)
                    .zip(sigmas)
                    .map(|((m, n), s)| -(m - n) / (4.0 * s * s))
                    .collect();
                let gn = gm.iter().map(|v| -v).collect();
                (gm, gn)
            }
        })
    }

    /// ln of T(lambda; mu, nu) = E_lambda[ sqrt(p_nu / p_mu) ].
    ///
    /// This is the log-integral of exp(-phi/alpha) against p_lambda for the
    /// canonical phi = (alpha/2) ln(p_mu / p_nu). T(mu; mu, nu) = AffH(mu, nu).
    pub fn tilted_affinity_log(&self, lambda: &[f64], mu: &[f64], nu: &[f64]) -> Result<f64> {
        self.check_param(lambda)?;
        self.check_param(mu)?;
        self.check_param(nu)?;
        Ok(match self {
            FamilyKind::Discrete { .. } => lambda
                .iter()
                .zip(mu)
                .zip(nu)
                .map(|((l, m), n)| l * (n / m).sqrt())
                .sum::<f64>()
                .ln(),
            FamilyKind::PoissonVec { .. } => lambda
                .iter()
                .zip(mu)
                .zip(nu)
                .map(|((l, m), n)| l * ((n / m).sqrt() - 1.0) + 0.5 * (m - n))
                .sum(),
            FamilyKind::GaussianVec { sigmas, .. } => lambda
                .iter()
                .zip(mu)
                .zip(nu)
                .zip(sigmas)
                .map(|(((l, m), n), s)| {
                    let v = s * s;
                    let d = n - m;
                    d * l / (2.0 * v) + d * d / (8.0 * v) + (m * m - n * n) / (4.0 * v)
                })
                .sum(),
        })
    }

    /// Gradient of [`tilted_affinity_log`](Self::tilted_affinity_log) in `lambda`.
    pub fn tilted_affinity_grad(&self, lambda: &[f64], mu: &[f64], nu: &[f64]) -> Result<Vec<f64>> {
        self.check_param(lambda)?;
        self.check_param(mu)?;
        self.check_param(nu)?;
        Ok(match self {
            FamilyKind::Discrete { .. } => {
                let ratios: Vec<f64> = mu.iter().zip(nu).map(|(m, n)| (n / m).sqrt()).collect();
                let denom: f64 = lambda.iter().zip(&ratios).map(|(l, r)| l * r).sum();
                ratios.iter().map(|r| r / denom).collect()
            }
            FamilyKind::PoissonVec { .. } => {
                mu.iter().zip(nu).map(|(m, n)| (n / m).sqrt() - 1.0).collect()
            }
            FamilyKind::GaussianVec { sigmas, .. } => mu
                .iter()
                .zip(nu)
                .zip(sigmas)
                .map(|((m, n), s)| (n - m) / (2.0 * s * s))
                .collect(),
        })
    }

    /// Draws one outcome from p_mu.
    pub fn sample<R: Rng + ?Sized>(&self, mu: &[f64], rng: &mut R) -> Result<Outcome> {
        self.check_param(mu)?;
        Ok(sample_unchecked(self, mu, rng))
    }

    /// Slow, closed-form-free affinity: direct summation (Discrete), a
    /// truncated series per coordinate (Poisson), adaptive quadrature per
    /// coordinate (Gaussian).
    pub fn affinity_oracle(&self, mu: &[f64], nu: &[f64]) -> Result<OracleValue> {
        self.check_param(mu)?;
        self.check_param(nu)?;
        match self {
            FamilyKind::Discrete { .. } => Ok(OracleValue {
                value: mu.iter().zip(nu).map(|(m, n)| (m * n).sqrt()).sum(),
                terms: mu.len(),
                note: "direct summation".to_string(),
            }),
            FamilyKind::PoissonVec { .. } => {
                let mut value = 1.0;
                let mut terms = 0;
                for (&m, &n) in mu.iter().zip(nu) {
                    let (v, t) = poisson_series_affinity(m, n)?;
                    value *= v;
                    terms += t;
                }
                Ok(OracleValue {
                    value,
                    terms,
                    note: format!("poisson series truncated at relative term < {POISSON_SERIES_TOL:e}"),
                })
            }
            FamilyKind::GaussianVec { sigmas, .. } => {
                let mut value = 1.0;
                let mut terms = 0;
                for ((&m, &n), &s) in mu.iter().zip(nu).zip(sigmas) {
                    let (v, evals) = gaussian_quadrature_affinity(m, n, s)?;
                    value *= v;
                    terms += evals;
                }
                Ok(OracleValue {
                    value,
                    terms,
                    note: "adaptive simpson quadrature over mean +/- 40 sigma".to_string(),
                })
            }
        }
    }
}

/// Result of [`FamilyKind::affinity_oracle`]; `terms` counts series terms or
/// integrand evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleValue {
    pub value: f64,
    pub terms: usize,
    pub note: String,
}

pub(crate) fn log_ratio_unchecked(family: &FamilyKind, mu: &[f64], nu: &[f64], omega: &Outcome) -> f64 {
    match omega {
        Outcome::Index(i) => mu[*i].ln() - nu[*i].ln(),
        Outcome::Counts(k) => k
            .iter()
            .zip(mu.iter().zip(nu))
            .map(|(&k, (&m, &n))| k as f64 * (m / n).ln() - (m - n))
            .sum(),
        Outcome::Real(w) => w
            .iter()
            .zip(mu.iter().zip(nu))
            .zip(family.sigmas())
            .map(|((&w, (&m, &n)), &s)| ((w - n).powi(2) - (w - m).powi(2)) / (2.0 * s * s))
            .sum(),
    }
}

pub(crate) fn sample_unchecked<R: Rng + ?Sized>(family: &FamilyKind, mu: &[f64], rng: &mut R) -> Outcome {
    match family {
        FamilyKind::Discrete { .. } => {
            let total: f64 = mu.iter().sum();
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            for (i, m) in mu.iter().enumerate() {
                acc += m;
                if u < acc {
                    return Outcome::Index(i);
                }
            }
            Outcome::Index(mu.len() - 1)
        }
        FamilyKind::PoissonVec { .. } => Outcome::Counts(
            mu.iter()
                .map(|&m| {
                    // rates are positive and finite, checked by the caller
                    let d = Poisson::new(m).expect("positive poisson rate");
                    d.sample(rng) as u64
                })
                .collect(),
        ),
        FamilyKind::GaussianVec { sigmas, .. } => Outcome::Real(
            mu.iter()
                .zip(sigmas)
                .map(|(&m, &s)| Normal::new(m, s).expect("positive sigma").sample(rng))
                .collect(),
        ),
    }
}

const POISSON_SERIES_TOL: f64 = 1e-16;
const POISSON_SERIES_MAX_TERMS: usize = 1_000_000;

/// sum_k sqrt(p_m(k) p_n(k)) for scalar rates, with log-space terms
/// accumulated by recursion.
fn poisson_series_affinity(m: f64, n: f64) -> Result<(f64, usize)> {
    let (lm, ln) = (m.ln(), n.ln());
    let peak = m.max(n);
    let mut log_fact = 0.0;
    let mut sum = 0.0;
    for k in 0..POISSON_SERIES_MAX_TERMS {
        let kf = k as f64;
        if k > 0 {
            log_fact += kf.ln();
        }
        let log_pm = kf * lm - m - log_fact;
        let log_pn = kf * ln - n - log_fact;
        let term = (0.5 * (log_pm + log_pn)).exp();
        sum += term;
        // both tails are decreasing past the larger rate
        let tail_m = log_pm.exp();
        let tail_n = log_pn.exp();
        if kf > peak && term <= POISSON_SERIES_TOL * sum && tail_m.max(tail_n) <= POISSON_SERIES_TOL {
            return Ok((sum, k + 1));
        }
    }
    Err(DensityError::OracleNonConvergence(format!(
        "poisson series for rates ({m}, {n}) exceeded {POISSON_SERIES_MAX_TERMS} terms"
    )))
}

fn gaussian_pdf(w: f64, m: f64, s: f64) -> f64 {
    let z = (w - m) / s;
    (-0.5 * z * z - LN_SQRT_2PI).exp() / s
}

/// integral of sqrt(N(w; m, s) N(w; n, s)) dw by adaptive Simpson.
fn gaussian_quadrature_affinity(m: f64, n: f64, s: f64) -> Result<(f64, usize)> {
    let f = |w: f64| (gaussian_pdf(w, m, s) * gaussian_pdf(w, n, s)).sqrt();
    let lo = m.min(n) - 40.0 * s;
    let hi = m.max(n) + 40.0 * s;
    // Split at the bump centre so the first panels already resolve it.
    let centre = 0.5 * (m + n);
    let mut evals = 0;
    let mut total = 0.0;
    for (a, b) in [(lo, centre), (centre, hi)] {
        let (v, e) = adaptive_simpson(&f, a, b, 1e-15, 60)?;
        total += v;
        evals += e;
    }
    Ok((total, evals))
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, max_depth: u32) -> Result<(f64, usize)> {
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        (a, fa): (f64, f64),
        (m, fm): (f64, f64),
        (b, fb): (f64, f64),
        whole: f64,
        tol: f64,
        depth: u32,
        evals: &mut usize,
    ) -> Option<f64> {
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let (flm, frm) = (f(lm), f(rm));
        *evals += 2;
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        // depth >= 4 keeps the first subdivisions from accepting a flat tail
        if depth > 4 && delta.abs() <= 15.0 * tol {
            return Some(left + right + delta / 15.0);
        }
        if depth == 0 {
            return None;
        }
        let l = recurse(f, (a, fa), (lm, flm), (m, fm), left, 0.5 * tol, depth - 1, evals)?;
        let r = recurse(f, (m, fm), (rm, frm), (b, fb), right, 0.5 * tol, depth - 1, evals)?;
        Some(l + r)
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let mut evals = 3;
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    recurse(f, (a, fa), (m, fm), (b, fb), whole, tol, max_depth, &mut evals)
        .map(|v| (v, evals))
        .ok_or_else(|| {
            DensityError::OracleNonConvergence(format!("adaptive simpson on [{a}, {b}] hit depth {max_depth}"))
        })
}
