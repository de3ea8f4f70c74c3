//! Minimal positive semidefinite periodic solutions of the frozen per-mode
//! game Riccati equations.
//!
//! The minimal solution is the limit of finite-horizon solutions with zero
//! terminal data as the horizon grows. Because the subproblem is θ-periodic,
//! the first-period restriction of the horizon-`Kθ` solution is the image of
//! zero under `K` applications of the one-period backward map, so doubling the
//! horizon only costs the additional periods.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::ModeSamples;
use crate::kernel::{KernelError, SubNode, SubproblemData};
use crate::linalg::SymMatrix;
use crate::problem::ProblemData;

/// Entries beyond this magnitude mean the finite-horizon solution escapes.
pub const DIVERGENCE_BOUND: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("state left [-1e12, 1e12] in mode {} at t = {t}", .mode + 1)]
    NonFiniteState { mode: usize, t: f64 },
    #[error("horizon limit reached in mode {} without convergence (changes {changes:?})", .mode + 1)]
    NoConvergence { mode: usize, changes: Vec<f64> },
    #[error("solution in mode {} is not positive semidefinite (λ_min = {min_eig:e})", .mode + 1)]
    NotPositiveSemidefinite { mode: usize, min_eig: f64 },
    #[error("time {t} is not aligned with the integration step")]
    Misaligned { t: f64 },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Full grid points per period (`G`), even and at least 2.
    pub grid_points: usize,
    pub rk4_substeps: usize,
    pub horizon_periods_initial: usize,
    pub horizon_periods_max: usize,
    /// Horizon-doubling stopping threshold, relative to `max(1, ‖X‖_F)`.
    pub inner_tol: f64,
    /// Doublings without improvement after which a change at the rounding
    /// floor is accepted.
    pub stall_detection_window: usize,
    /// Polish constant-coefficient solutions by Newton's method on the
    /// algebraic equation.
    pub newton_refine: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            grid_points: 64,
            rk4_substeps: 1,
            horizon_periods_initial: 8,
            horizon_periods_max: 4096,
            inner_tol: 1e-13,
            stall_detection_window: 3,
            newton_refine: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidConfig(m.into()));
        if self.grid_points < 2 || self.grid_points % 2 != 0 {
            return bad("grid_points must be even and at least 2");
        }
        if self.rk4_substeps == 0 {
            return bad("rk4_substeps must be positive");
        }
        if self.horizon_periods_initial == 0
            || self.horizon_periods_initial > self.horizon_periods_max
        {
            return bad("need 1 <= horizon_periods_initial <= horizon_periods_max");
        }
        if !(self.inner_tol > 0.0) {
            return bad("inner_tol must be positive");
        }
        if self.stall_detection_window == 0 {
            return bad("stall_detection_window must be positive");
        }
        Ok(())
    }

    /// Stage nodes per period: every RK4 stage lands on one of them.
    pub fn nodes_per_period(&self) -> usize {
        2 * self.grid_points * self.rk4_substeps
    }

    pub fn steps_per_period(&self) -> usize {
        self.grid_points * self.rk4_substeps
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for a in 0..n {
        for b in (a + 1)..n {
            let v = 0.5 * (m[(a, b)] + m[(b, a)]);
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
}

/// One backward RK4 step over `[t − Δ, t]`. `nodes` are the stage nodes at
/// `t`, `t − Δ/2`, `t − Δ`. Returns the new state and `f(t, x)`.
fn rk4_back(
    nodes: [&SubNode; 3],
    x: &DMatrix<f64>,
    dt: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let k1 = nodes[0].rhs(x);
    let k2 = nodes[1].rhs(&(x - &k1 * (0.5 * dt)));
    let k3 = nodes[1].rhs(&(x - &k2 * (0.5 * dt)));
    let k4 = nodes[2].rhs(&(x - &k3 * dt));
    let mut out = x - (&k1 + (&k2 + &k3) * 2.0 + &k4) * (dt / 6.0);
    symmetrize(&mut out);
    (out, k1)
}

fn check_bound(x: &DMatrix<f64>, mode: usize, t: f64) -> Result<(), SolverError> {
    if x.iter().all(|v| v.is_finite() && v.abs() <= DIVERGENCE_BOUND) {
        Ok(())
    } else {
        Err(SolverError::NonFiniteState { mode, t })
    }
}

fn check_mode(sub: &SubproblemData, p: &ProblemData, mode: usize) -> Result<(), SolverError> {
    if mode >= sub.modes.len() || sub.modes.len() != p.mode_count() {
        return Err(KernelError::InvalidOperand(format!(
            "mode {mode} for a {}-mode subproblem",
            sub.modes.len()
        ))
        .into());
    }
    Ok(())
}

/// Solution samples on the full grid of `[t_start, t_end]`, ascending in time.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub samples: Vec<SymMatrix>,
}

/// Integrates the mode-`mode` subproblem backward from `terminal` at `t_end`
/// down to `t_start` with classic RK4 (step `θ/(G·substeps)`).
pub fn integrate_backward(
    sub: &SubproblemData,
    p: &ProblemData,
    mode: usize,
    terminal: &SymMatrix,
    t_end: f64,
    t_start: f64,
    cfg: &SolverConfig,
) -> Result<Trajectory, SolverError> {
    cfg.validate()?;
    check_mode(sub, p, mode)?;
    if sub.nodes_per_period != cfg.nodes_per_period() {
        return Err(SolverError::InvalidConfig(format!(
            "subproblem has {} nodes per period, configuration needs {}",
            sub.nodes_per_period,
            cfg.nodes_per_period()
        )));
    }
    if !(t_start < t_end) {
        return Err(SolverError::InvalidConfig("t_start must precede t_end".into()));
    }
    let dt = sub.theta / cfg.steps_per_period() as f64;
    let to_step = |t: f64| -> Result<i64, SolverError> {
        let s = t / dt;
        let q = s.round();
        if (s - q).abs() > 1e-9 * (1.0 + s.abs()) {
            return Err(SolverError::Misaligned { t });
        }
        Ok(q as i64)
    };
    let (q_end, q_start) = (to_step(t_end)?, to_step(t_start)?);
    let k = sub.nodes_per_period as i64;
    let node = |idx: i64| sub.node(mode, idx.rem_euclid(k) as usize);
    let substeps = cfg.rk4_substeps as i64;

    let mut x = terminal.as_matrix().clone();
    let mut times = Vec::new();
    let mut samples = Vec::new();
    if q_end % substeps == 0 {
        times.push(q_end as f64 * dt);
        samples.push(terminal.clone());
    }
    for q in ((q_start + 1)..=q_end).rev() {
        let (next, _) = rk4_back([node(2 * q), node(2 * q - 1), node(2 * q - 2)], &x, dt);
        x = next;
        check_bound(&x, mode, (q - 1) as f64 * dt)?;
        if (q - 1) % substeps == 0 {
            times.push((q - 1) as f64 * dt);
            samples.push(SymMatrix::symmetrized(x.clone()));
        }
    }
    times.reverse();
    samples.reverse();
    Ok(Trajectory { times, samples })
}

/// One backward period from `start` at `t = θ` to `t = 0`. Returns the state at
/// `t = 0` and the full- and half-grid samples over `[0, θ)`.
fn run_period(
    sub: &SubproblemData,
    mode: usize,
    start: &DMatrix<f64>,
    cfg: &SolverConfig,
) -> Result<(DMatrix<f64>, ModeSamples), SolverError> {
    let g = cfg.grid_points;
    let s = cfg.rk4_substeps;
    let steps = g * s;
    let kn = sub.nodes_per_period;
    let dt = sub.theta / steps as f64;
    let node = |idx: usize| sub.node(mode, idx % kn);

    let mut states: Vec<Option<DMatrix<f64>>> = vec![None; steps + 1];
    let mut derivs: Vec<Option<DMatrix<f64>>> = vec![None; steps + 1];
    // Full-grid points plus the step points around each half-grid time.
    let keep = |q: usize| {
        let r = q % s;
        r == 0 || r == s / 2 || r == (s + 1) / 2
    };
    let mut x = start.clone();
    states[steps] = Some(x.clone());
    for q in (1..=steps).rev() {
        let (next, f) = rk4_back([node(2 * q), node(2 * q - 1), node(2 * q - 2)], &x, dt);
        if keep(q) {
            derivs[q] = Some(f);
        }
        x = next;
        check_bound(&x, mode, (q - 1) as f64 * dt)?;
        if keep(q - 1) {
            states[q - 1] = Some(x.clone());
        }
    }
    derivs[0] = Some(node(0).rhs(&x));

    let take = |q: usize| states[q].as_ref().expect("kept state");
    let samples: Vec<SymMatrix> = (0..g)
        .map(|gi| SymMatrix::symmetrized(take(gi * s).clone()))
        .collect();
    let half_samples: Vec<SymMatrix> = (0..g)
        .map(|gi| {
            if s % 2 == 0 {
                SymMatrix::symmetrized(take(gi * s + s / 2).clone())
            } else {
                // Cubic Hermite midpoint between the surrounding step points.
                let qa = gi * s + (s - 1) / 2;
                let qb = qa + 1;
                let fa = derivs[qa].as_ref().expect("kept derivative");
                let fb = derivs[qb].as_ref().expect("kept derivative");
                let mid = (take(qa) + take(qb)) * 0.5 + (fa - fb) * (dt / 8.0);
                SymMatrix::symmetrized(mid)
            }
        })
        .collect();
    Ok((
        x,
        ModeSamples {
            samples,
            half_samples,
        },
    ))
}

fn samples_distance(a: &ModeSamples, b: &ModeSamples) -> f64 {
    a.nodes()
        .zip(b.nodes())
        .map(|(x, y)| (x.as_matrix() - y.as_matrix()).norm())
        .fold(0.0, f64::max)
}

fn samples_norm(a: &ModeSamples) -> f64 {
    a.nodes().map(SymMatrix::frobenius_norm).fold(0.0, f64::max)
}

/// Minimal solution of one mode plus convergence diagnostics.
#[derive(Debug, Clone)]
pub struct MinimalSolution {
    pub samples: ModeSamples,
    /// Horizon (in periods) at which the doubling test passed.
    pub horizon_periods: usize,
    /// Max-Frobenius change between consecutive doubled horizons.
    pub changes: Vec<f64>,
    /// Accepted at the rounding floor rather than below `inner_tol`.
    pub stalled: bool,
    /// Newton polishing was applied.
    pub refined: bool,
}

/// Minimal positive semidefinite θ-periodic solution of the mode-`mode`
/// subproblem, sampled on the full and half grid of one period.
pub fn minimal_solution(
    sub: &SubproblemData,
    p: &ProblemData,
    mode: usize,
    cfg: &SolverConfig,
) -> Result<MinimalSolution, SolverError> {
    cfg.validate()?;
    check_mode(sub, p, mode)?;
    if sub.nodes_per_period != cfg.nodes_per_period() {
        return Err(SolverError::InvalidConfig(format!(
            "subproblem has {} nodes per period, configuration needs {}",
            sub.nodes_per_period,
            cfg.nodes_per_period()
        )));
    }
    let n = p.n();
    let mut state = DMatrix::zeros(n, n);
    let mut periods = 0usize;
    let mut checkpoint = cfg.horizon_periods_initial;
    let mut previous: Option<ModeSamples> = None;
    let mut changes: Vec<f64> = Vec::new();

    let (samples, horizon, stalled) = loop {
        let (end, samples) = run_period(sub, mode, &state, cfg)?;
        state = end;
        periods += 1;
        if periods < checkpoint {
            continue;
        }
        if let Some(prev) = previous.take() {
            let change = samples_distance(&samples, &prev);
            changes.push(change);
            let scale = samples_norm(&samples).max(1.0);
            if change <= cfg.inner_tol * scale {
                break (samples, periods, false);
            }
            let w = cfg.stall_detection_window;
            if changes.len() > w {
                let recent = &changes[changes.len() - w..];
                let before = changes[changes.len() - w - 1];
                let no_progress = recent.iter().all(|c| *c >= 0.5 * before);
                if no_progress && change <= 1e3 * f64::EPSILON * scale {
                    break (samples, periods, true);
                }
            }
        }
        if checkpoint >= cfg.horizon_periods_max {
            return Err(SolverError::NoConvergence { mode, changes });
        }
        previous = Some(samples);
        checkpoint = (checkpoint * 2).min(cfg.horizon_periods_max);
    };

    let mut out = MinimalSolution {
        samples,
        horizon_periods: horizon,
        changes,
        stalled,
        refined: false,
    };
    if cfg.newton_refine && sub.time_invariant {
        if let Some(x) = newton_polish(sub.node(mode, 0), out.samples.samples[0].as_matrix()) {
            out.samples = ModeSamples::constant(x, cfg.grid_points);
            out.refined = true;
        }
    }
    for x in out.samples.nodes() {
        let lam = x.min_eigenvalue().map_err(KernelError::from)?;
        if lam < -1e-10 * (1.0 + x.frobenius_norm()) {
            return Err(SolverError::NotPositiveSemidefinite { mode, min_eig: lam });
        }
    }
    // The subproblem's inner matrix is R^(h) itself, whose inertia was
    // verified node by node at assembly.
    Ok(out)
}

/// Newton's method on the algebraic equation of a time-invariant subproblem,
/// started from the integrated value. Returns `None` unless the residual
/// shrinks and the correction stays small.
fn newton_polish(node: &SubNode, start: &DMatrix<f64>) -> Option<SymMatrix> {
    let n = start.nrows();
    let scale = start.norm().max(1.0);
    let mut x = start.clone();
    let mut res = node.algebraic_residual(&x);
    let start_res = res.norm();
    for _ in 0..8 {
        if res.norm() <= 1e-15 * scale {
            break;
        }
        // (D − S X)ᵀ Δ + Δ (D − S X) = −g(X)
        let a = &node.drift - node.quad.as_matrix() * &x;
        let eye = DMatrix::<f64>::identity(n, n);
        let op = eye.kronecker(&a.transpose()) + a.transpose().kronecker(&eye);
        let rhs = DMatrix::from_iterator(n * n, 1, (-&res).iter().copied());
        let delta = op.lu().solve(&rhs)?;
        let mut delta = DMatrix::from_iterator(n, n, delta.iter().copied());
        symmetrize(&mut delta);
        let candidate = &x + &delta;
        let cres = node.algebraic_residual(&candidate);
        if cres.norm() >= res.norm() {
            break;
        }
        x = candidate;
        res = cres;
    }
    let moved = (&x - start).norm();
    (res.norm() < start_res && moved <= 1e-6 * scale).then(|| SymMatrix::symmetrized(x))
}
