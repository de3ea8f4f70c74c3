use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gtrde::experiment::{generate_benchmark_instance, run_campaign, ExperimentSpec};
use gtrde::iteration::{residual_by_mode, solve, IterationConfig, IterationError, SolutionFile};
use gtrde::kernel::sign_condition_check;
use gtrde::problem::{parse_problem, serialize_problem, ProblemData};
use gtrde::solver::SolverConfig;
use gtrde::stability::esms_check;

#[derive(Parser)]
#[command(name = "gtrde", version, about = "Coupled game Riccati equations with Markov switching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a problem file and write the solution.
    Solve {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Outer stopping tolerance.
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
        /// Grid points per period.
        #[arg(long, default_value_t = 64)]
        grid: usize,
        #[arg(long, default_value_t = 1)]
        substeps: usize,
        /// Polish constant-coefficient inner solutions by Newton's method.
        #[arg(long)]
        newton: bool,
    },
    /// Check a solution file against its problem.
    Verify {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        solution: PathBuf,
        /// Residual bound.
        #[arg(long, default_value_t = 1e-6)]
        max_residual: f64,
    },
    /// Write a random instance.
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a trial campaign over a range of dimensions.
    Experiment {
        /// Inclusive range `A..B`, or a single dimension.
        #[arg(long, value_parser = parse_dims)]
        dims: Dims,
        #[arg(long)]
        trials: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
        #[arg(long, default_value_t = 64)]
        grid: usize,
        /// Record wall time in the CSV.
        #[arg(long)]
        timing: bool,
    },
}

#[derive(Clone, Debug)]
struct Dims(Vec<usize>);

fn parse_dims(s: &str) -> Result<Dims, String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    let (a, b) = match s.split_once("..") {
        Some((a, b)) => (num(a)?, num(b.trim_start_matches('='))?),
        None => {
            let v = num(s)?;
            (v, v)
        }
    };
    if a == 0 || a > b {
        return Err(format!("expected 1 <= A <= B, got {s}"));
    }
    Ok(Dims((a..=b).collect()))
}

enum Failure {
    Validation(String),
    Solver(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Solver(_) => 2,
            Failure::Io(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) => write!(f, "validation error: {m}"),
            Failure::Solver(m) => write!(f, "solver error: {m}"),
            Failure::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn load_problem(path: &Path) -> Result<ProblemData, Failure> {
    parse_problem(&read(path)?).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn classify(e: IterationError) -> Failure {
    match e {
        IterationError::InvalidConfig(_)
        | IterationError::AssumptionViolation(_)
        | IterationError::Problem(_) => Failure::Validation(e.to_string()),
        _ => Failure::Solver(e.to_string()),
    }
}

fn cmd_solve(
    problem: &Path,
    out: &Path,
    tol: f64,
    grid: usize,
    substeps: usize,
    newton: bool,
) -> Result<(), Failure> {
    let p = load_problem(problem)?;
    let icfg = IterationConfig {
        outer_tol: tol,
        ..IterationConfig::default()
    };
    let scfg = SolverConfig {
        grid_points: grid,
        rk4_substeps: substeps,
        newton_refine: newton,
        ..SolverConfig::default()
    };
    let (x, rep) = solve(&p, &icfg, &scfg).map_err(classify)?;
    let mut file = SolutionFile::new(x, &rep);
    if let Ok(cert) = esms_check(&p, &file.solution) {
        if let Some(obj) = file.report.as_object_mut() {
            obj.insert(
                "stability".into(),
                serde_json::to_value(cert).unwrap_or_default(),
            );
        }
    }
    write(out, &(file.to_json() + "\n"))?;
    eprintln!(
        "converged in {} steps, delta {:e}, residual {:e}",
        rep.iterations(),
        rep.final_delta(),
        rep.residual
    );
    Ok(())
}

/// Square, symmetric, finite samples in the raw file.
fn check_raw_samples(v: &serde_json::Value) -> Result<(), String> {
    let modes = v["modes"].as_array().ok_or("shape: missing modes array")?;
    for (i, m) in modes.iter().enumerate() {
        for key in ["samples", "half_samples"] {
            let list = m[key]
                .as_array()
                .ok_or_else(|| format!("shape: mode {} has no {key}", i + 1))?;
            for (g, s) in list.iter().enumerate() {
                let rows: Vec<Vec<f64>> = serde_json::from_value(s.clone())
                    .map_err(|_| format!("shape: mode {} {key}[{g}] is not a numeric matrix", i + 1))?;
                let n = rows.len();
                if n == 0 || rows.iter().any(|r| r.len() != n) {
                    return Err(format!("shape: mode {} {key}[{g}] is not square", i + 1));
                }
                let scale = rows.iter().flatten().fold(0.0f64, |a, b| a.max(b.abs()));
                for a in 0..n {
                    for b in 0..a {
                        if (rows[a][b] - rows[b][a]).abs() > 1e-12 * (1.0 + scale) {
                            return Err(format!("symmetry: mode {} {key}[{g}]", i + 1));
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

fn cmd_verify(problem: &Path, solution: &Path, max_residual: f64) -> Result<(), Failure> {
    let p = load_problem(problem)?;
    let text = read(solution)?;
    let raw: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Validation(format!("parse: {}: {e}", solution.display())))?;
    check_raw_samples(&raw).map_err(Failure::Validation)?;
    let file = SolutionFile::from_json(&text)
        .map_err(|e| Failure::Validation(format!("shape: {}: {e}", solution.display())))?;
    let x = file.solution;
    x.check_shape(p.n(), p.mode_count())
        .map_err(|e| Failure::Validation(format!("shape: {e}")))?;
    if (x.theta - p.theta()).abs() > 1e-12 * p.theta() {
        return Err(Failure::Validation(format!(
            "shape: solution period {} differs from problem period {}",
            x.theta,
            p.theta()
        )));
    }

    for (i, m) in x.modes.iter().enumerate() {
        for s in m.nodes() {
            let lam = s
                .min_eigenvalue()
                .map_err(|e| Failure::Validation(format!("positive_semidefinite: {e}")))?;
            if lam < -1e-10 * (1.0 + s.frobenius_norm()) {
                return Err(Failure::Validation(format!(
                    "positive_semidefinite: mode {} has eigenvalue {lam:e}",
                    i + 1
                )));
            }
        }
    }
    let residuals = residual_by_mode(&p, &x)
        .map_err(|e| Failure::Validation(format!("residual: {e}")))?;
    let residual = residuals.iter().copied().fold(0.0, f64::max);
    if !(residual <= max_residual) {
        return Err(Failure::Validation(format!(
            "residual: {residual:e} exceeds {max_residual:e}"
        )));
    }
    let sign = sign_condition_check(&p, &x)
        .map_err(|e| Failure::Validation(format!("sign_conditions: {e}")))?;
    if !sign.pass {
        let (t, i) = sign.first_failure.unwrap_or((f64::NAN, 0));
        return Err(Failure::Validation(format!(
            "sign_conditions: fail at t = {t}, mode {}",
            i + 1
        )));
    }
    let cert = esms_check(&p, &x).map_err(|e| Failure::Validation(format!("esms: {e}")))?;
    if !cert.pass {
        return Err(Failure::Validation(format!(
            "esms: {:?} = {} is not stable",
            cert.kind, cert.value
        )));
    }
    println!(
        "ok: residual {residual:e}, min R22 eigenvalue {:e}, {:?} {}",
        sign.min_r22_eig, cert.kind, cert.value
    );
    Ok(())
}

fn cmd_generate(n: usize, seed: u64, trial: usize, out: &Path) -> Result<(), Failure> {
    if n == 0 {
        return Err(Failure::Validation("--n must be positive".into()));
    }
    write(out, &(serialize_problem(&generate_benchmark_instance(n, seed, trial)) + "\n"))
}

fn cmd_experiment(
    dims: Dims,
    trials: usize,
    seed: u64,
    out: &Path,
    tol: f64,
    grid: usize,
    timing: bool,
) -> Result<(), Failure> {
    let mut spec = ExperimentSpec::new(dims.0, trials, seed);
    spec.icfg.outer_tol = tol;
    spec.scfg.grid_points = grid;
    spec.record_timing = timing;
    let summary = run_campaign(&spec, out).map_err(|e| match e {
        gtrde::experiment::ExperimentError::InvalidSpec(m) => Failure::Validation(m),
        other => Failure::Io(other.to_string()),
    })?;
    for d in &summary.per_dim {
        eprintln!(
            "n = {:2}: {} converged, {} failed, {} excluded, median residual {:e}",
            d.n, d.converged, d.failed, d.excluded, d.residual_p50
        );
    }
    eprintln!(
        "convergence rate {:.3}, log10 residual slope {:+.4}",
        summary.convergence_rate, summary.trend.log10_slope
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Solve {
            problem,
            out,
            tol,
            grid,
            substeps,
            newton,
        } => cmd_solve(&problem, &out, tol, grid, substeps, newton),
        Command::Verify {
            problem,
            solution,
            max_residual,
        } => cmd_verify(&problem, &solution, max_residual),
        Command::Generate { n, seed, trial, out } => cmd_generate(n, seed, trial, &out),
        Command::Experiment {
            dims,
            trials,
            seed,
            out,
            tol,
            grid,
            timing,
        } => cmd_experiment(dims, trials, seed, &out, tol, grid, timing),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.code())
        }
    }
}
