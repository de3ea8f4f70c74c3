//! Random benchmark instances and trial campaigns over state
//! dimensions.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::iteration::{solve, IterationConfig, IterationError};
use crate::linalg::BlockPartition;
use crate::problem::{GeneratorMatrix, ModeCoefficients, ProblemData};
use crate::solver::SolverConfig;
use crate::stability::esms_check;

pub const CSV_HEADER: &str = "n,trial,mode,iters,delta,residual,abscissa,ms,status";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub dims: Vec<usize>,
    pub trials_per_dim: usize,
    pub modes: usize,
    pub noise_channels: usize,
    pub rng_seed: u64,
    pub icfg: IterationConfig,
    pub scfg: SolverConfig,
    /// Write wall-clock milliseconds to the CSV (breaks byte-identical output).
    pub record_timing: bool,
}

impl ExperimentSpec {
    pub fn new(dims: Vec<usize>, trials_per_dim: usize, rng_seed: u64) -> Self {
        ExperimentSpec {
            dims,
            trials_per_dim,
            modes: 2,
            noise_channels: 2,
            rng_seed,
            icfg: IterationConfig::default(),
            scfg: SolverConfig::default(),
            record_timing: false,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::InvalidSpec(m.into()));
        if self.dims.is_empty() || self.dims.contains(&0) {
            return bad("dims must be nonempty and positive");
        }
        if self.trials_per_dim == 0 {
            return bad("trials_per_dim must be positive");
        }
        if self.modes != 2 || self.noise_channels != 2 {
            return bad("the instance recipe has N = 2 modes and r = 2 noise channels");
        }
        if self.dims.iter().any(|&n| n >= 1 << 15) || self.trials_per_dim >= 1 << 32 {
            return bad("dims and trial counts exceed the seed stream layout");
        }
        self.icfg
            .validate()
            .map_err(|e| ExperimentError::InvalidSpec(e.to_string()))?;
        self.scfg
            .validate()
            .map_err(|e| ExperimentError::InvalidSpec(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Converged,
    NoConvergence,
    InnerFailure,
    AssumptionViolation,
}

impl TrialStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialStatus::Converged => "converged",
            TrialStatus::NoConvergence => "no_convergence",
            TrialStatus::InnerFailure => "inner_failure",
            TrialStatus::AssumptionViolation => "assumption_violation",
        }
    }
}

/// One CSV row; `mode` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub n: usize,
    pub trial: usize,
    pub mode: usize,
    pub iters: usize,
    pub delta: f64,
    pub residual: f64,
    pub abscissa: f64,
    pub ms: f64,
    pub status: TrialStatus,
}

impl TrialResult {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.n,
            self.trial,
            self.mode,
            self.iters,
            self.delta,
            self.residual,
            self.abscissa,
            self.ms,
            self.status.as_str()
        )
    }
}

/// Independent stream per `(n, trial, mode, matrix)`.
fn stream(seed: u64, n: usize, trial: usize, tag: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(((n as u64) << 48) | ((trial as u64) << 16) | tag);
    rng
}

fn normal(rng: &mut ChaCha20Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn uniform(rng: &mut ChaCha20Rng, r: usize, c: usize, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| hi * rng.random::<f64>())
}

/// Two-mode, two-channel constant instance with `m1 = m2 = n` and `θ = 1`.
pub fn generate_benchmark_instance(n: usize, seed: u64, trial: usize) -> ProblemData {
    assert!(n >= 1, "state dimension must be positive");
    let eye = DMatrix::<f64>::identity(n, n);
    let mut modes = Vec::with_capacity(2);
    for i in 0..2u64 {
        let draw = |kind: u64| stream(seed, n, trial, i * 32 + kind);
        let a = (0..3).map(|k| normal(&mut draw(k), n, n)).collect();

        let h1 = uniform(&mut draw(3), n, n, 1.0);
        let h2 = uniform(&mut draw(4), n, n, 1.0);
        let mut b0 = DMatrix::zeros(n, 2 * n);
        b0.columns_mut(0, n).copy_from(&(&eye * 4.0 - h1 * 0.5));
        b0.columns_mut(n, n).copy_from(&(&eye * 7.0 + h2 * 0.5));
        let mut b = vec![b0];
        for k in 1..=2 {
            b.push(uniform(&mut draw(4 + k), n, 2 * n, 0.01));
        }

        let u11 = uniform(&mut draw(7), n, n, 1.0);
        let u22 = uniform(&mut draw(8), n, n, 1.0);
        let r12 = uniform(&mut draw(9), n, n, 0.1);
        let mut r = DMatrix::zeros(2 * n, 2 * n);
        r.view_mut((0, 0), (n, n))
            .copy_from(&(-(&eye * 7.0) - u11.transpose() * &u11));
        r.view_mut((n, n), (n, n))
            .copy_from(&(&eye * 4.0 + u22.transpose() * &u22));
        r.view_mut((0, n), (n, n)).copy_from(&r12);
        r.view_mut((n, 0), (n, n)).copy_from(&r12.transpose());

        let mut l = DMatrix::zeros(n, 2 * n);
        l.columns_mut(0, n).copy_from(&uniform(&mut draw(10), n, n, 0.1));
        l.columns_mut(n, n).copy_from(&uniform(&mut draw(11), n, n, 0.1));

        let u = normal(&mut draw(12), n, n);
        let m = u.transpose() * &u + &eye * 0.1;

        modes.push(ModeCoefficients::constant(a, b, m, l, r));
    }
    let mut q = uniform(&mut stream(seed, n, trial, 31), 2, 2, 1.0);
    for i in 0..2 {
        q[(i, i)] = 0.0;
        q[(i, i)] = -q.row(i).sum();
    }
    ProblemData::new(
        n,
        BlockPartition::new(n, n).expect("n >= 1"),
        GeneratorMatrix::new(q).expect("finite generator"),
        1.0,
        modes,
    )
    .expect("recipe produces a well-formed instance")
}

/// Generates, solves and certifies one instance. Returns one row per mode.
pub fn run_trial(spec: &ExperimentSpec, n: usize, trial: usize) -> Vec<TrialResult> {
    let clock = Instant::now();
    let p = generate_benchmark_instance(n, spec.rng_seed, trial);
    let outcome = solve(&p, &spec.icfg, &spec.scfg);
    let ms = |c: &Instant| {
        if spec.record_timing {
            (c.elapsed().as_secs_f64() * 1e3).round()
        } else {
            0.0
        }
    };
    let rows = |iters, delta, residual: &dyn Fn(usize) -> f64, abscissa, status| {
        (0..p.mode_count())
            .map(|i| TrialResult {
                n,
                trial,
                mode: i + 1,
                iters,
                delta,
                residual: residual(i),
                abscissa,
                ms: ms(&clock),
                status,
            })
            .collect::<Vec<_>>()
    };
    match outcome {
        Ok((x, rep)) => {
            let abscissa = esms_check(&p, &x).map_or(f64::NAN, |c| c.value);
            rows(
                rep.iterations(),
                rep.final_delta(),
                &|i| rep.residual_by_mode[i],
                abscissa,
                TrialStatus::Converged,
            )
        }
        Err(e) => {
            let (iters, delta, status) = match e {
                IterationError::AssumptionViolation(_) => (0, f64::NAN, TrialStatus::AssumptionViolation),
                IterationError::NoConvergence {
                    iterations,
                    last_delta,
                } => (iterations, last_delta, TrialStatus::NoConvergence),
                IterationError::InnerFailure { h, .. }
                | IterationError::MonotonicityViolation { h, .. }
                | IterationError::SignConditionFailure { h, .. } => {
                    (h, f64::NAN, TrialStatus::InnerFailure)
                }
                _ => (0, f64::NAN, TrialStatus::InnerFailure),
            };
            rows(iters, delta, &|_| f64::NAN, f64::NAN, status)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimSummary {
    pub n: usize,
    pub converged: usize,
    pub failed: usize,
    /// Instances rejected by assumption validation.
    pub excluded: usize,
    pub residual_p50: f64,
    pub residual_p90: f64,
    pub residual_max: f64,
    pub max_abscissa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    /// Least-squares slope of `log10(median residual)` against `n`.
    pub log10_slope: f64,
    pub nondecreasing: bool,
    pub strictly_monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub per_dim: Vec<DimSummary>,
    /// Converged trials over trials that passed validation.
    pub convergence_rate: f64,
    pub trend: TrendCheck,
    pub config: ExperimentSpec,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// Per-dimension quantiles of the converged rows' residuals and the trend of
/// the median over `n`.
pub fn summarize(spec: &ExperimentSpec, rows: &[TrialResult]) -> CampaignSummary {
    let mut per_dim = Vec::new();
    let (mut ok_total, mut valid_total) = (0usize, 0usize);
    for &n in &spec.dims {
        let mut trials: BTreeMap<usize, TrialStatus> = BTreeMap::new();
        let mut res = Vec::new();
        let mut max_abscissa = f64::NEG_INFINITY;
        for r in rows.iter().filter(|r| r.n == n) {
            trials.insert(r.trial, r.status);
            if r.status == TrialStatus::Converged {
                res.push(r.residual);
                max_abscissa = max_abscissa.max(r.abscissa);
            }
        }
        res.sort_by(f64::total_cmp);
        let count = |s: TrialStatus| trials.values().filter(|&&v| v == s).count();
        let converged = count(TrialStatus::Converged);
        let excluded = count(TrialStatus::AssumptionViolation);
        ok_total += converged;
        valid_total += trials.len() - excluded;
        per_dim.push(DimSummary {
            n,
            converged,
            failed: trials.len() - converged - excluded,
            excluded,
            residual_p50: quantile(&res, 0.5),
            residual_p90: quantile(&res, 0.9),
            residual_max: res.last().copied().unwrap_or(f64::NAN),
            max_abscissa,
        });
    }
    let pts: Vec<(f64, f64)> = per_dim
        .iter()
        .filter(|d| d.residual_p50.is_finite())
        .map(|d| (d.n as f64, d.residual_p50.max(f64::MIN_POSITIVE).log10()))
        .collect();
    let log10_slope = if pts.len() < 2 {
        0.0
    } else {
        let k = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    };
    CampaignSummary {
        per_dim,
        convergence_rate: if valid_total == 0 {
            f64::NAN
        } else {
            ok_total as f64 / valid_total as f64
        },
        trend: TrendCheck {
            log10_slope,
            nondecreasing: log10_slope >= 0.0,
            strictly_monotone: pts.windows(2).all(|w| w[1].1 >= w[0].1),
        },
        config: spec.clone(),
    }
}

/// Runs every `(n, trial)` in parallel, appending rows to `out/trials.csv` in
/// `(n, trial, mode)` order as soon as they are contiguous, then writes
/// `out/summary.json`.
pub fn run_campaign(spec: &ExperimentSpec, out: &Path) -> Result<CampaignSummary, ExperimentError> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let csv_path = out.join("trials.csv");
    let mut csv = BufWriter::new(File::create(&csv_path).map_err(io_err(&csv_path))?);
    writeln!(csv, "{CSV_HEADER}").map_err(io_err(&csv_path))?;
    csv.flush().map_err(io_err(&csv_path))?;

    let jobs: Vec<(usize, usize)> = spec
        .dims
        .iter()
        .flat_map(|&n| (0..spec.trials_per_dim).map(move |t| (n, t)))
        .collect();
    let (tx, rx) = mpsc::channel::<(usize, Vec<TrialResult>)>();
    let mut all = Vec::with_capacity(jobs.len() * spec.modes);
    let write_result = std::thread::scope(|scope| {
        let jobs = &jobs;
        scope.spawn(move || {
            jobs.par_iter()
                .enumerate()
                .for_each_with(tx, |tx, (idx, &(n, t))| {
                    let _ = tx.send((idx, run_trial(spec, n, t)));
                });
        });
        let mut pending: BTreeMap<usize, Vec<TrialResult>> = BTreeMap::new();
        let mut next = 0usize;
        for (idx, rows) in rx {
            pending.insert(idx, rows);
            while let Some(rows) = pending.remove(&next) {
                for r in &rows {
                    writeln!(csv, "{}", r.csv_line())?;
                }
                csv.flush()?;
                all.extend(rows);
                next += 1;
            }
        }
        Ok::<(), std::io::Error>(())
    });
    write_result.map_err(io_err(&csv_path))?;

    let summary = summarize(spec, &all);
    let json_path = out.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&json_path, text + "\n").map_err(io_err(&json_path))?;
    Ok(summary)
}
