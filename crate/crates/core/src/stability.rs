//! Mean-square stability of the closed loop under `u = F_X x`.

use nalgebra::{DMatrix, Schur};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::GridSolution;
use crate::kernel::{feedback_gain, KernelError};
use crate::problem::{GeneratorMatrix, ProblemData};

pub use crate::kernel::{detectability_sufficient, DetectabilityResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StabilityError {
    #[error("closed loop is time-varying; use the monodromy certificate")]
    UnsupportedTimeVarying,
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("invalid closed loop: {0}")]
    Invalid(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Closed-loop matrices `A_k + B_k F` sampled on `nodes` equispaced times of
/// one period: `a[j][i][k]` is channel `k` of mode `i` at node `j`.
#[derive(Debug, Clone)]
pub struct ClosedLoopSystem {
    pub theta: f64,
    pub a: Vec<Vec<Vec<DMatrix<f64>>>>,
    pub generator: GeneratorMatrix,
    pub time_invariant: bool,
}

impl ClosedLoopSystem {
    /// A time-invariant loop from per-mode channel matrices.
    pub fn constant(
        a: Vec<Vec<DMatrix<f64>>>,
        generator: GeneratorMatrix,
    ) -> Result<Self, StabilityError> {
        let sys = ClosedLoopSystem {
            theta: 1.0,
            a: vec![a],
            generator,
            time_invariant: true,
        };
        sys.check()?;
        Ok(sys)
    }

    /// Builds the loop from a solution on `nodes` times per period (a multiple
    /// of the solution's node count; off-node values are interpolated).
    pub fn from_solution(
        p: &ProblemData,
        x: &GridSolution,
        nodes: usize,
    ) -> Result<Self, StabilityError> {
        x.check_shape(p.n(), p.mode_count()).map_err(KernelError::from)?;
        if nodes == 0 || nodes % x.node_count() != 0 {
            return Err(StabilityError::Invalid(format!(
                "{nodes} nodes is not a multiple of {}",
                x.node_count()
            )));
        }
        let time_invariant = p.is_constant() && x.is_constant(1e-9 * (1.0 + x.max_norm()));
        let count = if time_invariant { 1 } else { nodes };
        let stride = nodes / x.node_count();
        let mut a = Vec::with_capacity(count);
        for j in 0..count {
            let t = p.theta() * j as f64 / nodes as f64;
            let xt = if j % stride == 0 {
                x.node_tuple(j / stride)
            } else {
                x.interpolate_tuple(t)
            };
            let gains = feedback_gain(p, t, &xt)?;
            let mut per_mode = Vec::with_capacity(p.mode_count());
            for (i, f) in gains.0.iter().enumerate() {
                let s = p.evaluate(t, i).map_err(KernelError::from)?;
                per_mode.push(s.a.iter().zip(&s.b).map(|(ak, bk)| ak + bk * f).collect());
            }
            a.push(per_mode);
        }
        Ok(ClosedLoopSystem {
            theta: p.theta(),
            a,
            generator: p.generator().clone(),
            time_invariant,
        })
    }

    fn check(&self) -> Result<(), StabilityError> {
        let modes = self.generator.modes();
        let Some(first) = self.a.first().and_then(|m| m.first()).and_then(|c| c.first()) else {
            return Err(StabilityError::Invalid("empty closed loop".into()));
        };
        let n = first.nrows();
        for node in &self.a {
            if node.len() != modes {
                return Err(StabilityError::Invalid(format!(
                    "{} modes, generator has {modes}",
                    node.len()
                )));
            }
            for chans in node {
                if chans.is_empty() || chans.iter().any(|c| c.shape() != (n, n)) {
                    return Err(StabilityError::Invalid("channel matrices must be n x n".into()));
                }
            }
        }
        Ok(())
    }

    pub fn modes(&self) -> usize {
        self.generator.modes()
    }

    pub fn dim(&self) -> usize {
        self.a[0][0][0].nrows()
    }

    pub fn nodes(&self) -> usize {
        self.a.len()
    }
}

/// Matrix of `X ↦ A_0ᵀX + XA_0 + Σ A_kᵀXA_k + Σ_j q_ij X(j)` in column-major
/// `vec` coordinates, mode blocks stacked in order.
fn generator_matrix(a: &[Vec<DMatrix<f64>>], q: &GeneratorMatrix) -> DMatrix<f64> {
    let n = a[0][0].nrows();
    let nn = n * n;
    let modes = a.len();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut out = DMatrix::zeros(modes * nn, modes * nn);
    for (i, chans) in a.iter().enumerate() {
        let a0t = chans[0].transpose();
        let mut block = eye.kronecker(&a0t) + a0t.kronecker(&eye);
        for ak in &chans[1..] {
            let akt = ak.transpose();
            block += akt.kronecker(&akt);
        }
        for j in 0..modes {
            let mut view = out.view_mut((i * nn, j * nn), (nn, nn));
            if i == j {
                view += &block;
            }
            for d in 0..nn {
                view[(d, d)] += q.rate(i, j);
            }
        }
    }
    out
}

/// Generator of the mean-square dynamics of a time-invariant loop.
pub fn lyapunov_generator(cl: &ClosedLoopSystem) -> Result<DMatrix<f64>, StabilityError> {
    if !cl.time_invariant {
        return Err(StabilityError::UnsupportedTimeVarying);
    }
    cl.check()?;
    Ok(generator_matrix(&cl.a[0], &cl.generator))
}

/// Applies the generator to a tuple directly, without vectorization.
pub fn apply_generator(
    a: &[Vec<DMatrix<f64>>],
    q: &GeneratorMatrix,
    x: &[DMatrix<f64>],
) -> Vec<DMatrix<f64>> {
    a.iter()
        .enumerate()
        .map(|(i, chans)| {
            let xi = &x[i];
            let mut out = chans[0].transpose() * xi + xi * &chans[0];
            for ak in &chans[1..] {
                out += ak.transpose() * xi * ak;
            }
            for (j, xj) in x.iter().enumerate() {
                out += xj * q.rate(i, j);
            }
            out
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CertificateKind {
    SpectralAbscissa,
    MonodromyRadius,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    pub kind: CertificateKind,
    pub value: f64,
    pub pass: bool,
    /// Distance to the stability boundary (positive when stable).
    pub margin: f64,
}

impl StabilityCertificate {
    fn new(kind: CertificateKind, value: f64) -> Self {
        let margin = match kind {
            CertificateKind::SpectralAbscissa => -value,
            CertificateKind::MonodromyRadius => 1.0 - value,
        };
        StabilityCertificate {
            kind,
            value,
            pass: margin > 0.0,
            margin,
        }
    }
}

fn eigen_parts(m: DMatrix<f64>) -> Result<Vec<(f64, f64)>, StabilityError> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(StabilityError::NumericalFailure("non-finite operator".into()));
    }
    let schur = Schur::try_new(m, f64::EPSILON, 100_000)
        .ok_or_else(|| StabilityError::NumericalFailure("Schur iteration did not converge".into()))?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| (z.re, z.im))
        .collect())
}

pub fn abscissa_certificate(cl: &ClosedLoopSystem) -> Result<StabilityCertificate, StabilityError> {
    let value = eigen_parts(lyapunov_generator(cl)?)?
        .into_iter()
        .map(|(re, _)| re)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(StabilityCertificate::new(CertificateKind::SpectralAbscissa, value))
}

/// Spectral radius of the one-period transition matrix of the mean-square
/// dynamics, propagated by RK4 with one step per pair of nodes (stages land
/// on nodes). A time-invariant loop uses `steps` steps over `theta`.
pub fn monodromy_certificate(
    cl: &ClosedLoopSystem,
    steps: usize,
) -> Result<StabilityCertificate, StabilityError> {
    cl.check()?;
    let nodes = if cl.time_invariant {
        if steps == 0 {
            return Err(StabilityError::Invalid("steps must be positive".into()));
        }
        2 * steps
    } else {
        if cl.nodes() % 2 != 0 {
            return Err(StabilityError::Invalid("node count must be even".into()));
        }
        cl.nodes()
    };
    let gens: Vec<DMatrix<f64>> = if cl.time_invariant {
        vec![generator_matrix(&cl.a[0], &cl.generator).transpose()]
    } else {
        cl.a.iter()
            .map(|a| generator_matrix(a, &cl.generator).transpose())
            .collect()
    };
    let op = |j: usize| &gens[if cl.time_invariant { 0 } else { j % nodes }];
    let d = gens[0].nrows();
    let dt = cl.theta / (nodes / 2) as f64;
    let mut y = DMatrix::<f64>::identity(d, d);
    for q in 0..nodes / 2 {
        let (l0, l1, l2) = (op(2 * q), op(2 * q + 1), op(2 * q + 2));
        let k1 = l0 * &y;
        let k2 = l1 * (&y + &k1 * (0.5 * dt));
        let k3 = l1 * (&y + &k2 * (0.5 * dt));
        let k4 = l2 * (&y + &k3 * dt);
        y += (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0);
    }
    let value = eigen_parts(y)?
        .into_iter()
        .map(|(re, im)| re.hypot(im))
        .fold(0.0, f64::max);
    Ok(StabilityCertificate::new(CertificateKind::MonodromyRadius, value))
}

/// Abscissa certificate for time-invariant loops, monodromy otherwise.
pub fn esms_check(p: &ProblemData, x: &GridSolution) -> Result<StabilityCertificate, StabilityError> {
    let cl = ClosedLoopSystem::from_solution(p, x, x.node_count())?;
    if cl.time_invariant {
        abscissa_certificate(&cl)
    } else {
        monodromy_certificate(&cl, x.grid_points)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SymMatrix;
    use crate::problem::tests::{m1x1, scalar_problem};
    use proptest::prelude::*;

    fn gen(q: &[f64], n: usize) -> GeneratorMatrix {
        GeneratorMatrix::new(DMatrix::from_row_slice(n, n, q)).unwrap()
    }

    #[test]
    fn generator_examples() {
        let cl = ClosedLoopSystem::constant(vec![vec![m1x1(-1.0)]], gen(&[0.0], 1)).unwrap();
        assert_eq!(lyapunov_generator(&cl).unwrap(), m1x1(-2.0));

        let cl =
            ClosedLoopSystem::constant(vec![vec![m1x1(-1.0), m1x1(1.0)]], gen(&[0.0], 1)).unwrap();
        assert_eq!(lyapunov_generator(&cl).unwrap(), m1x1(-1.0));

        let cl = ClosedLoopSystem::constant(
            vec![vec![m1x1(-1.0)], vec![m1x1(-1.0)]],
            gen(&[-1.0, 1.0, 1.0, -1.0], 2),
        )
        .unwrap();
        let l = lyapunov_generator(&cl).unwrap();
        assert_eq!(l, DMatrix::from_row_slice(2, 2, &[-3.0, 1.0, 1.0, -3.0]));
        let mut eig: Vec<f64> = eigen_parts(l).unwrap().into_iter().map(|z| z.0).collect();
        eig.sort_by(f64::total_cmp);
        assert!((eig[0] + 4.0).abs() < 1e-12 && (eig[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn unstable_loop_fails() {
        let cl =
            ClosedLoopSystem::constant(vec![vec![m1x1(-1.0), m1x1(1.5)]], gen(&[0.0], 1)).unwrap();
        let c = abscissa_certificate(&cl).unwrap();
        assert!((c.value - 0.25).abs() < 1e-14);
        assert!(!c.pass);
        let m = monodromy_certificate(&cl, 64).unwrap();
        assert!(!m.pass && (m.value - 0.25f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn scalar_game_is_stabilizing() {
        let p = scalar_problem(0.0, -1.0, 1.0, [0.0, 0.0], [-7.0, 0.0, 4.0]);
        let x_star = (-2.0 + (4.0f64 + 3.0 / 7.0).sqrt()) / (3.0 / 14.0);
        let x = GridSolution::constant(
            &crate::grid::ModeSymTuple::new(vec![SymMatrix::scalar(x_star)]).unwrap(),
            8,
            1.0,
        );
        let c = esms_check(&p, &x).unwrap();
        assert_eq!(c.kind, CertificateKind::SpectralAbscissa);
        assert!((c.value - 2.0 * (-1.0 - 3.0 * x_star / 28.0)).abs() < 1e-12);
        assert!((c.value + 2.104417).abs() < 1e-6);
        assert!(c.pass);
    }

    #[test]
    fn time_varying_generator_is_rejected() {
        let cl = ClosedLoopSystem {
            theta: 1.0,
            a: vec![vec![vec![m1x1(-1.0)]], vec![vec![m1x1(-2.0)]]],
            generator: gen(&[0.0], 1),
            time_invariant: false,
        };
        assert_eq!(lyapunov_generator(&cl), Err(StabilityError::UnsupportedTimeVarying));
        let m = monodromy_certificate(&cl, 0).unwrap();
        assert!(m.value < 1.0);
    }

    fn mat(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(-1.5f64..1.5, n * n)
            .prop_map(move |v| DMatrix::from_row_slice(n, n, &v))
    }

    fn loop_strategy() -> impl Strategy<Value = (Vec<Vec<DMatrix<f64>>>, GeneratorMatrix)> {
        (1usize..=3, 1usize..=2, 0usize..=1).prop_flat_map(|(n, modes, r)| {
            (
                proptest::collection::vec(proptest::collection::vec(mat(n), r + 1), modes),
                proptest::collection::vec(0.0f64..1.0, modes * modes),
                -2.0f64..0.5,
            )
                .prop_map(move |(mut a, rates, shift)| {
                    for chans in &mut a {
                        for d in 0..n {
                            chans[0][(d, d)] += shift;
                        }
                    }
                    let mut q = DMatrix::from_row_slice(modes, modes, &rates);
                    for i in 0..modes {
                        q[(i, i)] = 0.0;
                        let s: f64 = q.row(i).sum();
                        q[(i, i)] = -s;
                    }
                    (a, GeneratorMatrix::new(q).unwrap())
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn generator_matches_direct((a, q) in loop_strategy(), seed in proptest::collection::vec(-1.0f64..1.0, 18)) {
            let n = a[0][0].nrows();
            let x: Vec<DMatrix<f64>> = (0..a.len())
                .map(|i| DMatrix::from_fn(n, n, |r, c| seed[(i * 9 + r * 3 + c) % 18]))
                .collect();
            let direct = apply_generator(&a, &q, &x);
            let cl = ClosedLoopSystem::constant(a, q).unwrap();
            let l = lyapunov_generator(&cl).unwrap();
            let v = DMatrix::from_iterator(n * n * x.len(), 1, x.iter().flat_map(|m| m.iter().copied()));
            let lv = l * v;
            for (i, d) in direct.iter().enumerate() {
                for (k, val) in d.iter().enumerate() {
                    prop_assert!((lv[i * n * n + k] - val).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn stability_paths_agree((a, q) in loop_strategy(), theta in 0.5f64..2.0) {
            let mut cl = ClosedLoopSystem::constant(a, q).unwrap();
            cl.theta = theta;
            let abs = abscissa_certificate(&cl).unwrap();
            prop_assume!(abs.value.abs() > 0.05);
            let mono = monodromy_certificate(&cl, 256).unwrap();
            prop_assert_eq!(abs.pass, mono.pass);
            prop_assert!((mono.value.ln() / theta - abs.value).abs() < 1e-4 * (1.0 + abs.value.abs()));
        }
    }
}
