//! Away-step Frank-Wolfe for concave maximization over products of a
//! feasible set, with adaptive backtracking on the step size.
//!
//! The iterate is kept as an explicit convex combination of atoms (points
//! returned by the LMO, plus the start point). At every iterate z the
//! Frank-Wolfe gap `max_s grad f(z) . (s - z)` is an upper bound on
//! `max f - f(z)` by concavity, so `f(z) + gap` certifies the maximum.

use crate::geometry::{dot, FeasibleSet};

use super::SolveError;

/// A differentiable concave function of the stacked variable.
pub trait ConcaveObjective {
    fn value(&self, z: &[f64]) -> Result<f64, SolveError>;
    fn gradient(&self, z: &[f64]) -> Result<Vec<f64>, SolveError>;
    /// Magnitude of the terms summed in `value`, for roundoff allowances.
    fn scale(&self) -> f64;
}

/// `blocks` copies of `set`, variables concatenated block by block.
#[derive(Debug, Clone, Copy)]
pub struct ProductSet<'a> {
    pub set: &'a FeasibleSet,
    pub blocks: usize,
}

impl ProductSet<'_> {
    pub fn lmo(&self, direction: &[f64]) -> Result<Vec<f64>, SolveError> {
        let n = self.set.dim();
        let mut out = Vec::with_capacity(n * self.blocks);
        for b in 0..self.blocks {
            out.extend(self.set.lmo(&direction[b * n..(b + 1) * n])?);
        }
        Ok(out)
    }
}

/// Convex combination of atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSet {
    atoms: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl ActiveSet {
    pub fn single(point: Vec<f64>) -> Self {
        ActiveSet { atoms: vec![point], weights: vec![1.0] }
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn point(&self) -> Vec<f64> {
        if let [only] = self.atoms.as_slice() {
            return only.clone();
        }
        let mut z = vec![0.0; self.atoms[0].len()];
        for (a, w) in self.atoms.iter().zip(&self.weights) {
            for (zi, ai) in z.iter_mut().zip(a) {
                *zi += w * ai;
            }
        }
        z
    }

    fn fw_update(&mut self, vertex: Vec<f64>, gamma: f64) {
        if gamma >= 1.0 {
            *self = ActiveSet::single(vertex);
            return;
        }
        self.weights.iter_mut().for_each(|w| *w *= 1.0 - gamma);
        match self.atoms.iter().position(|a| *a == vertex) {
            Some(k) => self.weights[k] += gamma,
            None => {
                self.atoms.push(vertex);
                self.weights.push(gamma);
            }
        }
        self.prune();
    }

    fn away_update(&mut self, k: usize, gamma: f64, drop: bool) {
        self.weights.iter_mut().for_each(|w| *w *= 1.0 + gamma);
        self.weights[k] -= gamma;
        if drop {
            self.atoms.remove(k);
            self.weights.remove(k);
        }
        self.prune();
    }

    fn prune(&mut self) {
        let mut k = 0;
        while k < self.atoms.len() {
            if self.weights[k] <= 1e-15 && self.atoms.len() > 1 {
                self.atoms.remove(k);
                self.weights.remove(k);
            } else {
                k += 1;
            }
        }
        let s: f64 = self.weights.iter().sum();
        self.weights.iter_mut().for_each(|w| *w /= s);
    }
}

#[derive(Debug, Clone)]
pub struct FwOutcome {
    pub point: Vec<f64>,
    pub value: f64,
    /// Frank-Wolfe gap at `point`; `value + gap >= max`.
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
    pub active: ActiveSet,
}

const MAX_BACKTRACKS: usize = 100;
const MAX_STALLS: usize = 5;

pub fn maximize<O: ConcaveObjective>(
    obj: &O,
    set: ProductSet<'_>,
    start: ActiveSet,
    tol: f64,
    max_iter: usize,
) -> Result<FwOutcome, SolveError> {
    let mut active = start;
    let mut z = active.point();
    let mut f = obj.value(&z)?;
    let roundoff = 1e-12 * (1.0 + obj.scale());
    let mut lip = 0.0f64;
    let mut stalls = 0;
    let mut iter = 0;

    loop {
        let grad = obj.gradient(&z)?;
        let s = set.lmo(&grad)?;
        let gz = dot(&grad, &z);
        let gap = (dot(&grad, &s) - gz).max(0.0);
        if gap <= tol {
            return Ok(FwOutcome { point: z, value: f, gap, iterations: iter, converged: true, active });
        }
        if iter >= max_iter || stalls >= MAX_STALLS {
            return Ok(FwOutcome { point: z, value: f, gap, iterations: iter, converged: false, active });
        }
        iter += 1;

        // away atom: the one least aligned with the gradient
        let (away_k, away_gap) = active
            .atoms
            .iter()
            .enumerate()
            .map(|(k, a)| (k, gz - dot(&grad, a)))
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });

        let use_fw = active.len() == 1 || gap >= away_gap;
        let (dir, gamma_max) = if use_fw {
            (s.iter().zip(&z).map(|(si, zi)| si - zi).collect::<Vec<_>>(), 1.0)
        } else {
            let w = active.weights[away_k];
            let a = &active.atoms[away_k];
            (z.iter().zip(a).map(|(zi, ai)| zi - ai).collect(), w / (1.0 - w))
        };
        let slope = if use_fw { gap } else { away_gap };
        let dd = dot(&dir, &dir);
        if dd == 0.0 || gamma_max <= 0.0 {
            stalls += 1;
            continue;
        }
        if lip <= 0.0 {
            lip = slope / dd;
        }

        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let gamma = (slope / (lip * dd)).min(gamma_max);
            let trial: Vec<f64> = z.iter().zip(&dir).map(|(zi, di)| zi + gamma * di).collect();
            let f_trial = obj.value(&trial)?;
            let linear = f + gamma * slope;
            if f_trial > linear + roundoff {
                return Err(SolveError::NonConcave {
                    value: f_trial,
                    tangent_bound: linear,
                });
            }
            if f_trial >= linear - 0.5 * lip * gamma * gamma * dd {
                accepted = Some(gamma);
                break;
            }
            // Near the optimum the gains fall below the resolution of f, so
            // fall back on the directional derivative, which stays accurate.
            // Still ascending at the trial point means f increased along the
            // whole step; otherwise the secant gives the next curvature.
            let d1 = dot(&obj.gradient(&trial)?, &dir);
            if d1 >= 0.0 {
                accepted = Some(gamma);
                break;
            }
            lip = lip.max((slope - d1) / (gamma * dd)).max(lip * (1.0 + 1e-3));
        }
        let Some(gamma) = accepted else {
            stalls += 1;
            continue;
        };

        if use_fw {
            active.fw_update(s, gamma);
        } else {
            active.away_update(away_k, gamma, gamma >= gamma_max);
        }
        // re-evaluate at the recombined point so value and gap refer to it
        let z_old = std::mem::replace(&mut z, active.point());
        f = obj.value(&z)?;
        if z == z_old {
            stalls += 1;
        } else {
            stalls = 0;
        }
        lip *= 0.5;
    }
}
