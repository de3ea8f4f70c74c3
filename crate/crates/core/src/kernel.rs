//! Right-hand sides of the coupled game Riccati system.
//!
//! Two families of evaluations live here:
//!
//! * the full stochastic equation (coupling operators `Π1, Π2, Π3`, the
//!   residual, the admissibility sign conditions and the feedback gain);
//! * the frozen per-mode subproblem used by the outer iteration, where the
//!   coupling terms are evaluated at the previous iterate and folded into
//!   effective weights `M^(h) = M + Π1`, `L^(h) = L + Π2`, `R^(h) = R + Π3`.
//!
//! Each subproblem mode is an ordinary deterministic game Riccati equation
//! `dX/dt = −[ÂᵀX + XÂ + M^(h) − (XB_0 + L^(h)) R^(h)⁻¹ (B_0ᵀX + L^(h)ᵀ)]`.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::grid::{GridSolution, ModeSymTuple};
use crate::linalg::{Inertia, LinalgError, SymIndefinite, SymMatrix};
use crate::problem::{CoefficientSnapshot, ProblemData, ProblemError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("invalid operand: {0}")]
    InvalidOperand(String),
    #[error("singular inner matrix R + Σ BᵀXB in mode {} at t = {t}", .mode + 1)]
    SingularInnerBlock { mode: usize, t: f64 },
    #[error(
        "sign condition lost at iteration {h}, mode {}, t = {t}: inertia {inertia:?}",
        .mode + 1
    )]
    SignConditionLost {
        h: usize,
        t: f64,
        mode: usize,
        inertia: Inertia,
    },
    #[error("time {t} is not a node of the subproblem grid")]
    OffGrid { t: f64 },
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

fn check_tuple(p: &ProblemData, x: &ModeSymTuple, what: &str) -> Result<(), KernelError> {
    if x.modes() != p.mode_count() || x.dim() != p.n() {
        return Err(KernelError::InvalidOperand(format!(
            "{what}: {} modes of size {}, problem has {} modes of size {}",
            x.modes(),
            x.dim(),
            p.mode_count(),
            p.n()
        )));
    }
    Ok(())
}

fn snapshots(p: &ProblemData, t: f64) -> Result<Vec<CoefficientSnapshot>, KernelError> {
    (0..p.mode_count())
        .map(|i| p.evaluate(t, i).map_err(KernelError::from))
        .collect()
}

/// Smallest |eigenvalue| test shared by every inner-matrix inversion.
fn factor_nonsingular(s: &SymMatrix, mode: usize, t: f64) -> Result<SymIndefinite, KernelError> {
    let eig = s.eigenvalues()?;
    let min_abs = eig.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min_abs < 1e-12 * (1.0 + s.frobenius_norm()) {
        return Err(KernelError::SingularInnerBlock { mode, t });
    }
    SymIndefinite::factor(s).map_err(|_| KernelError::SingularInnerBlock { mode, t })
}

/// Coupling terms of one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct PiTerms {
    /// `Σ_{l≠i} q_il X(l) + Σ_{k≥1} A_kᵀ X(i) A_k`
    pub pi1: SymMatrix,
    /// `Σ_{k≥1} A_kᵀ X(i) B_k`
    pub pi2: DMatrix<f64>,
    /// `Σ_{k≥1} B_kᵀ X(i) B_k`
    pub pi3: SymMatrix,
}

fn pi_mode(p: &ProblemData, snap: &CoefficientSnapshot, i: usize, x: &ModeSymTuple) -> PiTerms {
    let n = p.n();
    let m = p.m();
    let xi = x.get(i).as_matrix();
    let mut pi1 = DMatrix::zeros(n, n);
    for l in (0..p.mode_count()).filter(|&l| l != i) {
        pi1 += x.get(l).as_matrix() * p.generator().rate(i, l);
    }
    let mut pi2 = DMatrix::zeros(n, m);
    let mut pi3 = DMatrix::zeros(m, m);
    for k in 1..snap.a.len() {
        let ak = &snap.a[k];
        let bk = &snap.b[k];
        let xa = xi * ak;
        let xb = xi * bk;
        pi1 += ak.transpose() * &xa;
        pi2 += ak.transpose() * &xb;
        pi3 += bk.transpose() * &xb;
    }
    PiTerms {
        pi1: SymMatrix::symmetrized(pi1),
        pi2,
        pi3: SymMatrix::symmetrized(pi3),
    }
}

/// `Π1, Π2, Π3` at time `t` for every mode.
pub fn pi_operators(
    p: &ProblemData,
    t: f64,
    x: &ModeSymTuple,
) -> Result<Vec<PiTerms>, KernelError> {
    check_tuple(p, x, "X")?;
    let snaps = snapshots(p, t)?;
    Ok(snaps
        .iter()
        .enumerate()
        .map(|(i, s)| pi_mode(p, s, i, x))
        .collect())
}

/// Full left-hand side of the coupled equation per mode, with `dX/dt := xdot`.
pub fn gtrde_residual(
    p: &ProblemData,
    t: f64,
    x: &ModeSymTuple,
    xdot: &ModeSymTuple,
) -> Result<ModeSymTuple, KernelError> {
    check_tuple(p, x, "X")?;
    check_tuple(p, xdot, "dX/dt")?;
    let snaps = snapshots(p, t)?;
    let out = snaps
        .iter()
        .enumerate()
        .map(|(i, s)| residual_mode(p, s, i, t, x, xdot.get(i)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ModeSymTuple::new(out)?)
}

fn residual_mode(
    p: &ProblemData,
    s: &CoefficientSnapshot,
    i: usize,
    t: f64,
    x: &ModeSymTuple,
    xdot: &SymMatrix,
) -> Result<SymMatrix, KernelError> {
    let xi = x.get(i).as_matrix();
    let a0 = &s.a[0];
    let mut lin = xdot.as_matrix() + a0.transpose() * xi + xi * a0 + s.m.as_matrix();
    for j in 0..p.mode_count() {
        lin += x.get(j).as_matrix() * p.generator().rate(i, j);
    }
    let mut cross = xi * &s.b[0] + &s.l;
    let mut inner = s.r.as_matrix().clone();
    for k in 1..s.a.len() {
        lin += s.a[k].transpose() * xi * &s.a[k];
        cross += s.a[k].transpose() * xi * &s.b[k];
        inner += s.b[k].transpose() * xi * &s.b[k];
    }
    let inner = SymMatrix::symmetrized(inner);
    let f = factor_nonsingular(&inner, i, t)?;
    let solved = f.solve(&cross.transpose())?;
    Ok(SymMatrix::symmetrized(lin - &cross * solved))
}

/// Per-mode feedback gains `F_X(t,i)`, each `m × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackGain(pub Vec<DMatrix<f64>>);

/// `F_X = −(R + Σ B_kᵀXB_k)⁻¹ (B_0ᵀX + Σ B_kᵀXA_k + Lᵀ)`.
pub fn feedback_gain(
    p: &ProblemData,
    t: f64,
    x: &ModeSymTuple,
) -> Result<FeedbackGain, KernelError> {
    check_tuple(p, x, "X")?;
    let snaps = snapshots(p, t)?;
    let mut gains = Vec::with_capacity(p.mode_count());
    for (i, s) in snaps.iter().enumerate() {
        let xi = x.get(i).as_matrix();
        let mut num = s.b[0].transpose() * xi + s.l.transpose();
        let mut inner = s.r.as_matrix().clone();
        for k in 1..s.a.len() {
            num += s.b[k].transpose() * xi * &s.a[k];
            inner += s.b[k].transpose() * xi * &s.b[k];
        }
        let f = factor_nonsingular(&SymMatrix::symmetrized(inner), i, t)?;
        gains.push(-f.solve(&num)?);
    }
    Ok(FeedbackGain(gains))
}

// ---------------------------------------------------------------------------
// Sign conditions

/// Admissibility margins of `R + Σ_{k≥1} B_kᵀXB_k` at one `(t, i)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SignMargins {
    /// `λ_min(R22[X])`, must be positive.
    pub r22_min_eig: f64,
    /// `λ_max(R22♯[X])`, must be negative. NaN if `R22[X]` is singular.
    pub schur_max_eig: f64,
    pub inertia: Inertia,
    pub inertia_ok: bool,
}

impl SignMargins {
    pub fn pass(&self) -> bool {
        self.r22_min_eig > 0.0 && self.schur_max_eig < 0.0
    }
}

pub fn sign_margins(
    p: &ProblemData,
    t: f64,
    x: &ModeSymTuple,
) -> Result<Vec<SignMargins>, KernelError> {
    check_tuple(p, x, "X")?;
    let part = p.partition();
    snapshots(p, t)?
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let xi = x.get(i);
            let mut inner = s.r.clone();
            for k in 1..s.b.len() {
                inner = &inner + &xi.congruence(&s.b[k]);
            }
            let r22_min_eig = inner.block22(part).min_eigenvalue()?;
            let schur_max_eig = match inner.schur_lower(part) {
                Ok(sc) => sc.max_eigenvalue()?,
                Err(LinalgError::SingularBlock { .. }) => f64::NAN,
                Err(e) => return Err(e.into()),
            };
            let inertia = inner.signature(1e-12 * (1.0 + inner.frobenius_norm()))?;
            Ok(SignMargins {
                r22_min_eig,
                schur_max_eig,
                inertia,
                inertia_ok: inertia == part.game_inertia(),
            })
        })
        .collect()
}

/// Sign conditions over every node of a grid solution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignReport {
    pub min_r22_eig: f64,
    pub max_schur_eig: f64,
    /// Nodes where the inertia of the inner matrix differs from `diag(−I_m1, I_m2)`.
    pub inertia_mismatches: usize,
    /// `(t, mode)` of the first failure, if any.
    pub first_failure: Option<(f64, usize)>,
    pub pass: bool,
}

pub fn sign_condition_check(p: &ProblemData, x: &GridSolution) -> Result<SignReport, KernelError> {
    x.check_shape(p.n(), p.mode_count())?;
    let mut rep = SignReport {
        min_r22_eig: f64::INFINITY,
        max_schur_eig: f64::NEG_INFINITY,
        inertia_mismatches: 0,
        first_failure: None,
        pass: true,
    };
    for j in 0..x.node_count() {
        let t = x.node_time(j);
        for (i, sm) in sign_margins(p, t, &x.node_tuple(j))?.into_iter().enumerate() {
            rep.min_r22_eig = rep.min_r22_eig.min(sm.r22_min_eig);
            if sm.schur_max_eig.is_nan() {
                rep.max_schur_eig = f64::NAN;
            } else if !rep.max_schur_eig.is_nan() {
                rep.max_schur_eig = rep.max_schur_eig.max(sm.schur_max_eig);
            }
            if !sm.inertia_ok {
                rep.inertia_mismatches += 1;
            }
            if !sm.pass() || !sm.inertia_ok {
                rep.pass = false;
                rep.first_failure.get_or_insert((t, i));
            }
        }
    }
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Frozen subproblems

/// Effective weights of one mode at one node, plus the precomputed quadratic
/// form of the right-hand side:
/// `dX/dt = −[driftᵀX + X·drift + constant − X·quad·X]`.
#[derive(Debug, Clone)]
pub struct SubNode {
    pub m: SymMatrix,
    pub l: DMatrix<f64>,
    pub r: SymMatrix,
    pub(crate) drift: DMatrix<f64>,
    pub(crate) quad: SymMatrix,
    pub(crate) constant: SymMatrix,
}

impl SubNode {
    fn compile(
        snap: &CoefficientSnapshot,
        m: SymMatrix,
        l: DMatrix<f64>,
        r: SymMatrix,
        f: &SymIndefinite,
    ) -> Result<Self, KernelError> {
        let b0 = &snap.b[0];
        let rinv_bt = f.solve(&b0.transpose())?;
        let rinv_lt = f.solve(&l.transpose())?;
        let drift = &snap.a_hat - b0 * &rinv_lt;
        let quad = SymMatrix::symmetrized(b0 * rinv_bt);
        let constant = SymMatrix::symmetrized(m.as_matrix() - &l * rinv_lt);
        Ok(SubNode {
            m,
            l,
            r,
            drift,
            quad,
            constant,
        })
    }

    /// Subproblem right-hand side at this node.
    pub fn rhs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let xd = x * &self.drift;
        let xq = x * self.quad.as_matrix();
        let mut out = &xq * x - self.constant.as_matrix() - &xd - xd.transpose();
        // symmetrize in place
        let n = out.nrows();
        for a in 0..n {
            for b in (a + 1)..n {
                let v = 0.5 * (out[(a, b)] + out[(b, a)]);
                out[(a, b)] = v;
                out[(b, a)] = v;
            }
        }
        out
    }

    /// Residual of the algebraic equation `0 = driftᵀX + X·drift + constant − X·quad·X`.
    pub(crate) fn algebraic_residual(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        -self.rhs(x)
    }
}

/// Frozen weights on `nodes_per_period` equispaced times per period.
#[derive(Debug, Clone)]
pub struct SubproblemData {
    pub h: usize,
    pub theta: f64,
    pub nodes_per_period: usize,
    /// `modes[i][j]` is mode `i` at time `jθ/nodes_per_period`.
    pub modes: Vec<Vec<SubNode>>,
    /// Problem coefficients and the previous iterate are both constant in time.
    pub time_invariant: bool,
}

impl SubproblemData {
    pub fn node_time(&self, j: usize) -> f64 {
        self.theta * j as f64 / self.nodes_per_period as f64
    }

    /// Node index of `t` (periodic), if `t` lies on the grid.
    pub fn node_of(&self, t: f64) -> Option<usize> {
        let s = (t / self.theta).rem_euclid(1.0) * self.nodes_per_period as f64;
        let j = s.round();
        ((s - j).abs() <= 1e-9 * (1.0 + s)).then_some(j as usize % self.nodes_per_period)
    }

    pub fn node(&self, mode: usize, j: usize) -> &SubNode {
        &self.modes[mode][j % self.nodes_per_period]
    }
}

/// Freezes the coupling terms at `xprev` (interpolated to the node grid when
/// the grids differ) and verifies the inertia of `R^(h)` at every node.
pub fn subproblem_assemble(
    p: &ProblemData,
    xprev: &GridSolution,
    h: usize,
    nodes_per_period: usize,
) -> Result<SubproblemData, KernelError> {
    xprev.check_shape(p.n(), p.mode_count())?;
    if nodes_per_period == 0 || nodes_per_period % xprev.node_count() != 0 {
        return Err(KernelError::InvalidOperand(format!(
            "node count {nodes_per_period} is not a multiple of the solution's {}",
            xprev.node_count()
        )));
    }
    let theta = p.theta();
    let part = p.partition();
    let time_invariant =
        p.is_constant() && xprev.is_constant(1e-12 * (1.0 + xprev.max_norm()));
    let mut modes: Vec<Vec<SubNode>> = vec![Vec::with_capacity(nodes_per_period); p.mode_count()];
    let stride = nodes_per_period / xprev.node_count();
    for j in 0..nodes_per_period {
        let t = theta * j as f64 / nodes_per_period as f64;
        let x = if j % stride == 0 {
            xprev.node_tuple(j / stride)
        } else {
            xprev.interpolate_tuple(t)
        };
        for (i, s) in snapshots(p, t)?.iter().enumerate() {
            let pi = pi_mode(p, s, i, &x);
            let m = &s.m + &pi.pi1;
            let l = &s.l + &pi.pi2;
            let r = &s.r + &pi.pi3;
            let inertia = r.signature(1e-12 * (1.0 + r.frobenius_norm()))?;
            if inertia != part.game_inertia() {
                return Err(KernelError::SignConditionLost {
                    h,
                    t,
                    mode: i,
                    inertia,
                });
            }
            let f = factor_nonsingular(&r, i, t)?;
            modes[i].push(SubNode::compile(s, m, l, r, &f)?);
        }
    }
    Ok(SubproblemData {
        h,
        theta,
        nodes_per_period,
        modes,
        time_invariant,
    })
}

/// Time derivative of the mode-`i` subproblem solution at `(t, X)`, computed
/// directly from the frozen weights (the integrator uses the precompiled form).
pub fn deterministic_rhs(
    sub: &SubproblemData,
    p: &ProblemData,
    t: f64,
    i: usize,
    x: &SymMatrix,
) -> Result<SymMatrix, KernelError> {
    let j = sub.node_of(t).ok_or(KernelError::OffGrid { t })?;
    if i >= sub.modes.len() {
        return Err(ProblemError::InvalidMode {
            mode: i,
            modes: sub.modes.len(),
        }
        .into());
    }
    if x.dim() != p.n() {
        return Err(KernelError::InvalidOperand(format!(
            "X is {0}x{0}, expected {1}x{1}",
            x.dim(),
            p.n()
        )));
    }
    let node = sub.node(i, j);
    let snap = p.evaluate(t, i)?;
    let xm = x.as_matrix();
    let cross = xm * &snap.b[0] + &node.l;
    let f = factor_nonsingular(&node.r, i, t)?;
    let solved = f.solve(&cross.transpose())?;
    let bracket = snap.a_hat.transpose() * xm + xm * &snap.a_hat + node.m.as_matrix()
        - &cross * solved;
    Ok(SymMatrix::symmetrized(-bracket))
}

/// Sufficient detectability test per mode: `M^(h) − L2^(h) R22^(h)⁻¹ L2^(h)ᵀ ≻ 0`
/// on every node (a full-rank output map makes the pair detectable).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectabilityResult {
    pub detectable: bool,
    /// Worst `λ_min` of the expression over the nodes.
    pub margin: f64,
}

pub fn detectability_sufficient(
    sub: &SubproblemData,
    partition: crate::linalg::BlockPartition,
) -> Result<Vec<DetectabilityResult>, KernelError> {
    sub.modes
        .iter()
        .map(|nodes| {
            let mut margin = f64::INFINITY;
            let mut ok = true;
            for node in nodes {
                let r22 = node.r.block22(partition);
                let l2 = node
                    .l
                    .columns(partition.m1, partition.m2)
                    .into_owned();
                let solved = SymIndefinite::factor(&r22)?.solve(&l2.transpose())?;
                let expr = SymMatrix::symmetrized(node.m.as_matrix() - &l2 * solved);
                let lam = expr.min_eigenvalue()?;
                margin = margin.min(lam);
                ok &= lam > 1e-12 * (1.0 + expr.frobenius_norm());
            }
            Ok(DetectabilityResult {
                detectable: ok,
                margin,
            })
        })
        .collect()
}
