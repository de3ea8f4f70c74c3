//! Outer fixed-point iteration: `X^(0) = 0`, then freeze the coupling terms at
//! the previous iterate, solve every mode's deterministic game equation for its
//! minimal solution, and repeat until the iterates stop moving.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridSolution, ModeSymTuple};
use crate::kernel::{gtrde_residual, sign_condition_check, subproblem_assemble, KernelError};
use crate::linalg::SymMatrix;
use crate::problem::{ProblemData, ProblemError};
use crate::solver::{minimal_solution, SolverConfig, SolverError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IterationError {
    #[error("invalid iteration configuration: {0}")]
    InvalidConfig(String),
    #[error("assumptions violated: {}", .0.join(", "))]
    AssumptionViolation(Vec<String>),
    #[error("no convergence after {iterations} outer steps (last delta {last_delta:e})")]
    NoConvergence { iterations: usize, last_delta: f64 },
    #[error("outer step {h}, mode {}: {source}", .mode + 1)]
    InnerFailure {
        h: usize,
        mode: usize,
        #[source]
        source: SolverError,
    },
    #[error("outer step {h} decreased the iterate (λ_min = {min_eig:e})")]
    MonotonicityViolation { h: usize, min_eig: f64 },
    #[error("sign conditions fail at outer step {h} (t = {t}, mode {})", .mode + 1)]
    SignConditionFailure { h: usize, t: f64, mode: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationConfig {
    pub outer_tol: f64,
    pub max_outer_iterations: usize,
    pub monotonicity_slack: f64,
}

impl Default for IterationConfig {
    fn default() -> Self {
        IterationConfig {
            outer_tol: 1e-12,
            max_outer_iterations: 500,
            monotonicity_slack: 1e-10,
        }
    }
}

impl IterationConfig {
    pub fn validate(&self) -> Result<(), IterationError> {
        if !(self.outer_tol > 0.0) {
            return Err(IterationError::InvalidConfig("outer_tol must be positive".into()));
        }
        if self.max_outer_iterations == 0 {
            return Err(IterationError::InvalidConfig(
                "max_outer_iterations must be positive".into(),
            ));
        }
        if !(self.monotonicity_slack >= 0.0) {
            return Err(IterationError::InvalidConfig(
                "monotonicity_slack must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Diagnostics of one outer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub h: usize,
    /// `max_{t,i} ‖X^(h) − X^(h−1)‖_F` over the node grid.
    pub delta: f64,
    /// `min_{t,i} λ_min(X^(h) − X^(h−1))`.
    pub monotonicity_min_eig: f64,
    /// `min λ_min(R22[X^(h)])` over the grid.
    pub r22_min_eig: f64,
    /// `max λ_max` of the Schur complement over the grid.
    pub schur_max_eig: f64,
    /// Horizon (periods) used by each mode's inner solve.
    pub horizons: Vec<usize>,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub steps: Vec<StepReport>,
    pub converged: bool,
    /// Max-over-grid residual of the coupled equation at the final iterate.
    pub residual: f64,
    pub residual_by_mode: Vec<f64>,
    /// Deltas increased after the third step.
    pub delta_warning: bool,
}

impl IterationReport {
    pub fn iterations(&self) -> usize {
        self.steps.len()
    }

    pub fn final_delta(&self) -> f64 {
        self.steps.last().map_or(f64::INFINITY, |s| s.delta)
    }
}

/// Solves from `X^(0) = 0`.
pub fn solve(
    p: &ProblemData,
    icfg: &IterationConfig,
    scfg: &SolverConfig,
) -> Result<(GridSolution, IterationReport), IterationError> {
    let start = GridSolution::zeros(p.n(), p.mode_count(), scfg.grid_points, p.theta());
    solve_from(p, &start, icfg, scfg)
}

/// Runs the outer iteration from an arbitrary initial iterate on the solver grid.
pub fn solve_from(
    p: &ProblemData,
    initial: &GridSolution,
    icfg: &IterationConfig,
    scfg: &SolverConfig,
) -> Result<(GridSolution, IterationReport), IterationError> {
    icfg.validate()?;
    scfg
        .validate()
        .map_err(|e| IterationError::InvalidConfig(e.to_string()))?;
    let validation = p.validate_assumptions(scfg.grid_points)?;
    if !validation.passed() {
        return Err(IterationError::AssumptionViolation(
            validation.failures().into_iter().map(String::from).collect(),
        ));
    }
    initial.check_shape(p.n(), p.mode_count()).map_err(KernelError::from)?;
    if initial.grid_points != scfg.grid_points || (initial.theta - p.theta()).abs() > 0.0 {
        return Err(IterationError::InvalidConfig(
            "initial iterate is not on the solver grid".into(),
        ));
    }

    let mut x = initial.clone();
    let mut steps: Vec<StepReport> = Vec::new();
    for h in 1..=icfg.max_outer_iterations {
        let clock = Instant::now();
        let sub = subproblem_assemble(p, &x, h, scfg.nodes_per_period())?;
        let solved: Vec<_> = (0..p.mode_count())
            .into_par_iter()
            .map(|i| minimal_solution(&sub, p, i, scfg))
            .collect();
        let mut modes = Vec::with_capacity(solved.len());
        let mut horizons = Vec::with_capacity(solved.len());
        for (i, r) in solved.into_iter().enumerate() {
            let sol = r.map_err(|e| match e {
                SolverError::Kernel(k) => IterationError::Kernel(k),
                source => IterationError::InnerFailure { h, mode: i, source },
            })?;
            horizons.push(sol.horizon_periods);
            modes.push(sol.samples);
        }
        let next = GridSolution {
            theta: p.theta(),
            grid_points: scfg.grid_points,
            modes,
        };
        let delta = next.max_distance(&x);
        let mono = next.min_difference_eigenvalue(&x).map_err(KernelError::from)?;
        let sign = sign_condition_check(p, &next)?;
        steps.push(StepReport {
            h,
            delta,
            monotonicity_min_eig: mono,
            r22_min_eig: sign.min_r22_eig,
            schur_max_eig: sign.max_schur_eig,
            horizons,
            ms: clock.elapsed().as_secs_f64() * 1e3,
        });
        if mono < -icfg.monotonicity_slack {
            return Err(IterationError::MonotonicityViolation { h, min_eig: mono });
        }
        if !sign.pass {
            let (t, mode) = sign.first_failure.unwrap_or((f64::NAN, 0));
            return Err(IterationError::SignConditionFailure { h, t, mode });
        }
        x = next;
        if delta <= icfg.outer_tol {
            let residual_by_mode = residual_by_mode(p, &x)?;
            let residual = residual_by_mode.iter().copied().fold(0.0, f64::max);
            let delta_warning = steps
                .windows(2)
                .skip(2)
                .any(|w| w[1].delta > w[0].delta);
            return Ok((
                x,
                IterationReport {
                    steps,
                    converged: true,
                    residual,
                    residual_by_mode,
                    delta_warning,
                },
            ));
        }
    }
    Err(IterationError::NoConvergence {
        iterations: icfg.max_outer_iterations,
        last_delta: steps.last().map_or(f64::INFINITY, |s| s.delta),
    })
}

/// Per-mode `max_t ‖residual‖_F` with `dX/dt` from fourth-order central
/// differences on the periodic node grid.
pub fn residual_by_mode(p: &ProblemData, x: &GridSolution) -> Result<Vec<f64>, KernelError> {
    x.check_shape(p.n(), p.mode_count())?;
    let k = x.node_count();
    let constant = x.is_constant(1e-13 * (1.0 + x.max_norm()));
    let hn = x.node_spacing();
    let mut worst = vec![0.0f64; p.mode_count()];
    for j in 0..k {
        let xj = x.node_tuple(j);
        let xdot = if constant {
            ModeSymTuple::zeros(p.n(), p.mode_count())
        } else {
            let at = |d: isize| (j as isize + d).rem_euclid(k as isize) as usize;
            let parts = x
                .modes
                .iter()
                .map(|m| {
                    let v = |d| m.node(at(d)).as_matrix();
                    let d = (v(-2) - v(2) + (v(1) - v(-1)) * 8.0) / (12.0 * hn);
                    SymMatrix::symmetrized(d)
                })
                .collect();
            ModeSymTuple::new(parts)?
        };
        let res = gtrde_residual(p, x.node_time(j), &xj, &xdot)?;
        for (w, r) in worst.iter_mut().zip(res.iter()) {
            *w = w.max(r.frobenius_norm());
        }
    }
    Ok(worst)
}

pub fn residual_norm(p: &ProblemData, x: &GridSolution) -> Result<f64, KernelError> {
    Ok(residual_by_mode(p, x)?.into_iter().fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    /// `min_{t,i} λ_min(X̃′ − X̃)`.
    pub min_eig: f64,
    pub pass: bool,
    pub base_iterations: usize,
    pub bumped_iterations: usize,
}

/// Solves `P` and `P` with `M(i)` raised by `bump(i) ⪰ 0`, and checks that the
/// solution does not decrease.
pub fn comparison_experiment(
    p: &ProblemData,
    bump: &[SymMatrix],
    icfg: &IterationConfig,
    scfg: &SolverConfig,
) -> Result<ComparisonReport, IterationError> {
    let bumped = p.with_state_weight_bump(bump)?;
    let (x, rep) = solve(p, icfg, scfg)?;
    let (xb, repb) = solve(&bumped, icfg, scfg)?;
    let min_eig = xb.min_difference_eigenvalue(&x).map_err(KernelError::from)?;
    Ok(ComparisonReport {
        min_eig,
        pass: min_eig >= -1e-9,
        base_iterations: rep.iterations(),
        bumped_iterations: repb.iterations(),
    })
}

/// On-disk solution: the grid solution plus the iteration report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionFile {
    #[serde(flatten)]
    pub solution: GridSolution,
    #[serde(default)]
    pub report: serde_json::Value,
}

impl SolutionFile {
    pub fn new(solution: GridSolution, report: &IterationReport) -> Self {
        SolutionFile {
            solution,
            report: serde_json::to_value(report).unwrap_or(serde_json::Value::Null),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("solution serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::linalg::BlockPartition;
    use crate::problem::tests::{m1x1, scalar_problem};
    use crate::problem::{GeneratorMatrix, ModeCoefficients};
    use nalgebra::DMatrix;

    pub(crate) fn quadratic_root(m: f64) -> f64 {
        let (a, b, c) = (3.0 / 28.0, 2.0, -m);
        (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a)
    }

    pub(crate) fn symmetric_two_mode() -> ProblemData {
        let mode = ModeCoefficients::constant(
            vec![m1x1(-1.0)],
            vec![DMatrix::from_row_slice(1, 2, &[1.0, 1.0])],
            m1x1(1.0),
            DMatrix::zeros(1, 2),
            DMatrix::from_row_slice(2, 2, &[-7.0, 0.0, 0.0, 4.0]),
        );
        ProblemData::new(
            1,
            BlockPartition::new(1, 1).unwrap(),
            GeneratorMatrix::new(DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0])).unwrap(),
            1.0,
            vec![mode.clone(), mode],
        )
        .unwrap()
    }

    /// Newton on `g_i(x) = −2x_i + q_ii x_i + q_ij x_j + 1 − (3/28) x_i² = 0`.
    pub(crate) fn newton_two_mode() -> [f64; 2] {
        let q = [[-1.0, 1.0], [1.0, -1.0]];
        let c = 3.0 / 28.0;
        let mut x = [0.0f64, 0.0];
        for _ in 0..50 {
            let g = |i: usize| {
                -2.0 * x[i] + q[i][0] * x[0] + q[i][1] * x[1] + 1.0 - c * x[i] * x[i]
            };
            let (g0, g1) = (g(0), g(1));
            let j00 = -2.0 + q[0][0] - 2.0 * c * x[0];
            let j11 = -2.0 + q[1][1] - 2.0 * c * x[1];
            let (j01, j10) = (q[0][1], q[1][0]);
            let det = j00 * j11 - j01 * j10;
            x[0] -= (j11 * g0 - j01 * g1) / det;
            x[1] -= (-j10 * g0 + j00 * g1) / det;
        }
        x
    }

    #[test]
    fn scalar_converges_in_two_steps() {
        let p = scalar_problem(0.0, -1.0, 1.0, [0.0, 0.0], [-7.0, 0.0, 4.0]);
        let (x, rep) = solve(&p, &IterationConfig::default(), &SolverConfig::default()).unwrap();
        assert_eq!(rep.iterations(), 2);
        assert!(rep.converged);
        assert!(x.modes[0].nodes().all(|s| (s.get(0, 0) - quadratic_root(1.0)).abs() <= 1e-8));
        assert!(rep.residual <= 1e-10, "{}", rep.residual);
        assert_eq!(rep.steps[1].delta, 0.0);
    }

    #[test]
    fn symmetric_two_mode_matches_newton() {
        let p = symmetric_two_mode();
        let oracle = newton_two_mode();
        assert!((oracle[0] - oracle[1]).abs() < 1e-15);
        assert!((oracle[0] - quadratic_root(1.0)).abs() < 1e-12);
        let (x, rep) = solve(&p, &IterationConfig::default(), &SolverConfig::default()).unwrap();
        for (i, m) in x.modes.iter().enumerate() {
            assert!(m.nodes().all(|s| (s.get(0, 0) - oracle[i]).abs() <= 1e-8));
        }
        assert!(rep.residual <= 1e-10, "{}", rep.residual);
        for s in &rep.steps {
            assert!(s.monotonicity_min_eig >= -1e-10);
        }
        for w in rep.steps.windows(3).skip(1) {
            assert!(w[2].delta <= w[0].delta);
        }
    }

    #[test]
    fn zero_weights_converge_immediately() {
        let p = scalar_problem(0.0, -1.0, 0.0, [0.0, 0.0], [-7.0, 0.0, 4.0]);
        let (x, rep) = solve(&p, &IterationConfig::default(), &SolverConfig::default()).unwrap();
        assert_eq!(rep.iterations(), 1);
        assert_eq!(x.max_norm(), 0.0);
    }

    #[test]
    fn warm_start_is_idempotent() {
        let p = symmetric_two_mode();
        let icfg = IterationConfig::default();
        let scfg = SolverConfig::default();
        let (x, _) = solve(&p, &icfg, &scfg).unwrap();
        let (y, rep) = solve_from(&p, &x, &icfg, &scfg).unwrap();
        assert_eq!(rep.iterations(), 1);
        assert!(y.max_distance(&x) <= icfg.outer_tol);
    }

    #[test]
    fn comparison_with_bump() {
        let p = scalar_problem(0.0, -1.0, 1.0, [0.0, 0.0], [-7.0, 0.0, 4.0]);
        let icfg = IterationConfig::default();
        let scfg = SolverConfig::default();
        let zero = comparison_experiment(&p, &[SymMatrix::zeros(1)], &icfg, &scfg).unwrap();
        assert_eq!(zero.min_eig, 0.0);
        let rep = comparison_experiment(&p, &[SymMatrix::scalar(1.0)], &icfg, &scfg).unwrap();
        let expected = quadratic_root(2.0) - quadratic_root(1.0);
        assert!((quadratic_root(2.0) - 0.9514990804).abs() < 1e-9);
        assert!(rep.pass);
        assert!((rep.min_eig - expected).abs() <= 1e-8);
    }

    #[test]
    fn residual_of_zero_is_state_weight() {
        let p = scalar_problem(0.0, -1.0, 1.0, [0.0, 0.0], [-7.0, 0.0, 4.0]);
        let x = GridSolution::zeros(1, 1, 8, 1.0);
        assert_eq!(residual_norm(&p, &x).unwrap(), 1.0);
    }

    #[test]
    fn assumption_violation_is_reported() {
        let p = scalar_problem(0.0, -1.0, -1.0, [0.0, 0.0], [-7.0, 0.0, 4.0]);
        let err = solve(&p, &IterationConfig::default(), &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, IterationError::AssumptionViolation(_)), "{err}");
    }

    #[test]
    fn iteration_limit() {
        let p = symmetric_two_mode();
        let icfg = IterationConfig {
            max_outer_iterations: 3,
            ..IterationConfig::default()
        };
        let err = solve(&p, &icfg, &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, IterationError::NoConvergence { iterations: 3, .. }));
    }

    #[test]
    fn solution_file_round_trip() {
        let p = scalar_problem(0.0, -1.0, 1.0, [0.0, 0.0], [-7.0, 0.0, 4.0]);
        let scfg = SolverConfig {
            grid_points: 4,
            ..SolverConfig::default()
        };
        let (x, rep) = solve(&p, &IterationConfig::default(), &scfg).unwrap();
        let text = SolutionFile::new(x.clone(), &rep).to_json();
        let back = SolutionFile::from_json(&text).unwrap();
        assert_eq!(back.solution, x);
        assert_eq!(back.report["converged"], serde_json::Value::Bool(true));
    }
}
