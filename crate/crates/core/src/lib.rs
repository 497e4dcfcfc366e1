pub mod densities;
pub mod geometry;
pub mod model;
pub mod saddle;
pub mod estimator;
pub mod validate;

use std::fmt;

use crate::estimator::AffineEstimator;
use crate::model::{validate_problem, ProblemSpec, Violation};
use crate::saddle::{minimize_alpha, SaddleSolution, SolveError};

#[derive(Debug)]
pub enum PipelineError {
    Invalid(Vec<Violation>),
    Solve(SolveError),
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::Invalid(vs) => {
                write!(f, "problem violates model requirements:")?;
                for v in vs {
                    write!(f, "\n  {v}")?;
                }
                Ok(())
            }
            PipelineError::Solve(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for PipelineError {}

impl From<SolveError> for PipelineError {
    fn from(e: SolveError) -> Self {
        PipelineError::Solve(e)
    }
}

/// Checks the spec, locates the saddle point and builds the estimator.
pub fn solve(spec: &ProblemSpec) -> Result<(SaddleSolution, AffineEstimator), PipelineError> {
    let violations = validate_problem(spec);
    if !violations.is_empty() {
        return Err(PipelineError::Invalid(violations));
    }
    let saddle = minimize_alpha(spec)?;
    let est = estimator::build(spec, &saddle)?;
    Ok((saddle, est))
}
