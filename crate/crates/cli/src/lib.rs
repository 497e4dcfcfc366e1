//! The `minimax` command line: solve, estimate, validate and sweep over the
//! JSON problem, estimator and observation formats.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use minimax_core::estimator::{parse_observations, AffineEstimator};
use minimax_core::model::{parse_problem_with, ConstantMode, ParseOptions, ProblemSpec};
use minimax_core::validate::{consistency_suite, coverage_mc, default_probes, DEFAULT_WORKERS};
use minimax_core::{solve, PipelineError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_WARNING: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "minimax", version, about = "Affine estimators of linear functionals with certified risk")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve a problem and write the estimator.
    Solve {
        problem: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Evaluate an estimator on observations.
    Estimate { estimator: PathBuf, observations: PathBuf },
    /// Monte Carlo coverage and consistency checks of an estimator.
    Validate {
        problem: PathBuf,
        estimator: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// JSON array of states; defaults to x*, y* and random states.
        #[arg(long)]
        probes: Option<PathBuf>,
        #[arg(long, default_value_t = 200_000)]
        n_samples: usize,
        #[arg(long, default_value_t = 5)]
        random_probes: usize,
        #[arg(long, default_value_t = DEFAULT_WORKERS)]
        workers: usize,
    },
    /// Solve for a list of epsilon or repetition values and write CSV.
    Sweep {
        problem: PathBuf,
        #[arg(long, value_enum)]
        vary: Vary,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Vary {
    Epsilon,
    Repetitions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConstantModeArg {
    Certified,
    ClosedForm,
}

#[derive(Debug, Clone, Args, Default)]
pub struct Flags {
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    #[arg(long, global = true)]
    pub delta: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub tol_inner: Option<f64>,
    #[arg(long, global = true)]
    pub tol_alpha: Option<f64>,
    /// Exit with status 1 when the requested precision is not met.
    #[arg(long, global = true)]
    pub strict: bool,
    #[arg(long, value_enum, global = true)]
    pub constant_mode: Option<ConstantModeArg>,
    /// Accept epsilon in (0, 1).
    #[arg(long, global = true)]
    pub allow_large_epsilon: bool,
}

/// A failure that ends the command, with its exit status.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Failure { code: EXIT_INPUT, message: message.into() }
    }
}

type Outcome = Result<i32, Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::input(format!("input error: cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::input(format!("input error: cannot write {}: {e}", path.display())))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), Failure> {
    out.write_all(text.as_bytes())
        .map_err(|e| Failure::input(format!("input error: cannot write output: {e}")))
}

fn load_problem(path: &Path, flags: &Flags) -> Result<ProblemSpec, Failure> {
    let text = read(path)?;
    let schema = |e: minimax_core::model::ModelError| Failure::input(format!("schema error: {}: {e}", path.display()));
    // parse permissively so a flag can bring epsilon back into range
    let mut spec = parse_problem_with(&text, ParseOptions { allow_large_epsilon: true }).map_err(schema)?;
    if let Some(v) = flags.epsilon {
        spec.epsilon = v;
    }
    if let Some(v) = flags.delta {
        spec.delta = v;
    }
    if let Some(v) = flags.seed {
        spec.solver.seed = v;
    }
    if let Some(v) = flags.tol_inner {
        spec.solver.tol_inner = v;
    }
    if let Some(v) = flags.tol_alpha {
        spec.solver.tol_alpha = v;
    }
    if let Some(m) = flags.constant_mode {
        spec.solver.constant_mode = match m {
            ConstantModeArg::Certified => ConstantMode::Certified,
            ConstantModeArg::ClosedForm => ConstantMode::ClosedForm,
        };
    }
    spec.check(ParseOptions { allow_large_epsilon: flags.allow_large_epsilon }).map_err(schema)?;
    Ok(spec)
}

fn load_estimator(path: &Path) -> Result<AffineEstimator, Failure> {
    AffineEstimator::from_json(&read(path)?)
        .map_err(|e| Failure::input(format!("schema error: {}: {e}", path.display())))
}

fn run_solve(spec: &ProblemSpec) -> Result<AffineEstimator, Failure> {
    solve(spec).map(|(_, est)| est).map_err(|e| match e {
        PipelineError::Invalid(_) => Failure::input(format!("model error: {e}")),
        PipelineError::Solve(_) => Failure::input(format!("solver error: {e}")),
    })
}

fn precision_code(met: bool, flags: &Flags, err: &mut dyn Write, what: &str) -> i32 {
    if met {
        return EXIT_OK;
    }
    let _ = writeln!(err, "warning: precision not met{what}");
    if flags.strict {
        EXIT_WARNING
    } else {
        EXIT_OK
    }
}

fn cmd_solve(problem: &Path, out_path: Option<&Path>, flags: &Flags, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let spec = load_problem(problem, flags)?;
    let est = run_solve(&spec)?;
    if let Some(p) = out_path {
        write_file(p, &est.to_json())?;
    }
    emit(out, &format!("{}\n", est.report()))?;
    for w in &est.provenance.warnings {
        let _ = writeln!(err, "warning: {w}");
    }
    Ok(precision_code(est.provenance.precision_met, flags, err, ""))
}

fn cmd_estimate(est_path: &Path, obs_path: &Path, out: &mut dyn Write) -> Outcome {
    let est = load_estimator(est_path)?;
    let obs = parse_observations(&est, &read(obs_path)?)
        .map_err(|e| Failure::input(format!("schema error: {}: {e}", obs_path.display())))?;
    let value = est
        .evaluate(&obs)
        .map_err(|e| Failure::input(format!("observation error: {}: {e}", obs_path.display())))?;
    emit(
        out,
        &format!(
            "estimate: {value}\ninterval: [{}, {}]\nrisk: {}\nepsilon: {}\n",
            value - est.risk,
            value + est.risk,
            est.risk,
            est.epsilon
        ),
    )?;
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
fn cmd_validate(
    problem: &Path,
    est_path: &Path,
    out_path: Option<&Path>,
    probes_path: Option<&Path>,
    n_samples: usize,
    random_probes: usize,
    workers: usize,
    flags: &Flags,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Outcome {
    let spec = load_problem(problem, flags)?;
    let est = load_estimator(est_path)?;
    let seed = spec.solver.seed;
    let probes = match probes_path {
        Some(p) => serde_json::from_str::<Vec<Vec<f64>>>(&read(p)?)
            .map_err(|e| Failure::input(format!("schema error: {}: {e}", p.display())))?,
        None => default_probes(&spec, &est, random_probes, seed),
    };
    let report = coverage_mc(&spec, &est, &probes, n_samples, seed, workers)
        .map_err(|e| Failure::input(format!("validation error: {e}")))?;
    let checks =
        consistency_suite(&spec, &est).map_err(|e| Failure::input(format!("validation error: {e}")))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    match out_path {
        Some(p) => write_file(p, &json)?,
        None => emit(out, &json)?,
    }
    let mut summary = String::new();
    for (i, p) in report.probes.iter().enumerate() {
        summary += &format!(
            "probe {i}: miss_rate {} (limit {}) {}\n",
            p.miss_rate,
            report.epsilon + p.mc_half_width,
            if p.pass { "pass" } else { "FAIL" }
        );
    }
    for c in &checks {
        summary += &format!(
            "check {}: residual {} (tolerance {}) {}\n",
            c.name,
            c.residual,
            c.tolerance,
            if c.pass { "pass" } else { "FAIL" }
        );
    }
    summary += &format!("coverage: {}\n", if report.pass { "pass" } else { "FAIL" });
    // the JSON report owns stdout when no output file is given
    if out_path.is_some() {
        emit(out, &summary)?;
    } else {
        let _ = err.write_all(summary.as_bytes());
    }
    if !report.pass || checks.iter().any(|c| !c.pass) {
        return Ok(EXIT_WARNING);
    }
    Ok(EXIT_OK)
}

fn cmd_sweep(
    problem: &Path,
    vary: Vary,
    values: &[f64],
    out_path: Option<&Path>,
    flags: &Flags,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Outcome {
    let base = load_problem(problem, flags)?;
    let opts = ParseOptions { allow_large_epsilon: flags.allow_large_epsilon };
    let mut csv = csv::Writer::from_writer(Vec::new());
    let header = ["value", "risk", "alpha_star", "psi_upper", "psi_lower"];
    csv.write_record(header).expect("in-memory csv");
    let mut code = EXIT_OK;
    for &v in values {
        let mut spec = base.clone();
        match vary {
            Vary::Epsilon => spec.epsilon = v,
            Vary::Repetitions => {
                if !(v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64) {
                    return Err(Failure::input(format!("input error: repetitions must be a positive integer, got {v}")));
                }
                spec.channels.iter_mut().for_each(|c| c.repetitions = v as u32);
            }
        }
        spec.check(opts).map_err(|e| Failure::input(format!("schema error: sweep value {v}: {e}")))?;
        let est = run_solve(&spec)?;
        let p = &est.provenance;
        csv.serialize((v, est.risk, est.alpha, p.psi_upper, p.psi_lower)).expect("in-memory csv");
        code = code.max(precision_code(p.precision_met, flags, err, &format!(" at value {v}")));
    }
    let bytes = csv.into_inner().expect("in-memory csv");
    let text = String::from_utf8(bytes).expect("csv is utf-8");
    match out_path {
        Some(p) => write_file(p, &text)?,
        None => emit(out, &text)?,
    }
    Ok(code)
}

/// Runs the command line `args` (program name first) and returns the exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = err.write_all(text.as_bytes());
                EXIT_INPUT
            } else {
                let _ = out.write_all(text.as_bytes());
                EXIT_OK
            };
        }
    };
    let flags = &cli.flags;
    let result = match &cli.command {
        Command::Solve { problem, out: o } => cmd_solve(problem, o.as_deref(), flags, out, err),
        Command::Estimate { estimator, observations } => cmd_estimate(estimator, observations, out),
        Command::Validate { problem, estimator, out: o, probes, n_samples, random_probes, workers } => cmd_validate(
            problem,
            estimator,
            o.as_deref(),
            probes.as_deref(),
            *n_samples,
            *random_probes,
            *workers,
            flags,
            out,
            err,
        ),
        Command::Sweep { problem, vary, values, out: o } => cmd_sweep(problem, *vary, values, o.as_deref(), flags, out, err),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "{}", f.message);
            f.code
        }
    }
}
