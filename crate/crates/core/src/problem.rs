//! Problem instances: coefficients per mode, the Markov generator, the control
//! partition and the common period.
//!
//! Coefficients are either constant or a single harmonic
//! `base + amplitude · sin(2πt/θ)`. Modes are indexed from 0 in the API and
//! from 1 in any human-facing output.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{from_rows, to_rows, BlockPartition, LinalgError, SymIndefinite, SymMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("mode {mode} out of range (N = {modes})")]
    InvalidMode { mode: usize, modes: usize },
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

fn invalid(msg: impl Into<String>) -> ProblemError {
    ProblemError::InvalidProblem(msg.into())
}

/// Markov chain generator `Q = (q_ij)`.
///
/// Construction only checks shape and finiteness; the sign and row-sum
/// conditions are reported by [`ProblemData::validate_assumptions`] so that a
/// malformed generator can still be loaded and diagnosed.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix(DMatrix<f64>);

impl GeneratorMatrix {
    pub fn new(q: DMatrix<f64>) -> Result<Self, ProblemError> {
        if q.nrows() == 0 || q.nrows() != q.ncols() {
            return Err(invalid(format!(
                "generator must be square and nonempty, got {}x{}",
                q.nrows(),
                q.ncols()
            )));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(invalid("generator has non-finite entries"));
        }
        Ok(GeneratorMatrix(q))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ProblemError> {
        Self::new(from_rows(rows)?)
    }

    pub fn modes(&self) -> usize {
        self.0.nrows()
    }

    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// Worst violation of `q_ij ≥ 0 (i ≠ j)` and `Σ_j q_ij = 0`, with the
    /// offending row. Zero margin means the generator is valid.
    pub fn violation(&self) -> (f64, Option<usize>) {
        let mut worst = 0.0;
        let mut row = None;
        for i in 0..self.modes() {
            let sum: f64 = self.0.row(i).iter().sum();
            let mut v = if sum.abs() > 1e-12 { sum.abs() } else { 0.0 };
            for j in 0..self.modes() {
                if i != j && self.0[(i, j)] < 0.0 {
                    v = f64::max(v, -self.0[(i, j)]);
                }
            }
            if v > worst {
                worst = v;
                row = Some(i);
            }
        }
        (worst, row)
    }
}

/// A possibly time-varying θ-periodic matrix coefficient.
#[derive(Debug, Clone, PartialEq)]
pub enum Coefficient {
    Constant(DMatrix<f64>),
    Sinusoidal {
        base: DMatrix<f64>,
        amplitude: DMatrix<f64>,
        period: f64,
    },
}

impl Coefficient {
    /// A sinusoid with an all-zero amplitude collapses to a constant.
    pub fn sinusoidal(
        base: DMatrix<f64>,
        amplitude: DMatrix<f64>,
        period: f64,
    ) -> Result<Self, ProblemError> {
        if base.shape() != amplitude.shape() {
            return Err(invalid(format!(
                "amplitude shape {:?} differs from base {:?}",
                amplitude.shape(),
                base.shape()
            )));
        }
        if !(period > 0.0 && period.is_finite()) {
            return Err(invalid(format!("period must be positive, got {period}")));
        }
        if amplitude.iter().all(|v| *v == 0.0) {
            return Ok(Coefficient::Constant(base));
        }
        Ok(Coefficient::Sinusoidal {
            base,
            amplitude,
            period,
        })
    }

    pub fn base(&self) -> &DMatrix<f64> {
        match self {
            Coefficient::Constant(b) => b,
            Coefficient::Sinusoidal { base, .. } => base,
        }
    }

    pub fn amplitude(&self) -> Option<&DMatrix<f64>> {
        match self {
            Coefficient::Constant(_) => None,
            Coefficient::Sinusoidal { amplitude, .. } => Some(amplitude),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.base().shape()
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Coefficient::Constant(_))
    }

    pub fn value(&self, t: f64) -> DMatrix<f64> {
        match self {
            Coefficient::Constant(b) => b.clone(),
            Coefficient::Sinusoidal {
                base,
                amplitude,
                period,
            } => {
                let phase = t.rem_euclid(*period) / period;
                let s = (2.0 * PI * phase).sin();
                base + amplitude * s
            }
        }
    }

    fn map(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Coefficient {
        match self {
            Coefficient::Constant(b) => Coefficient::Constant(f(b)),
            Coefficient::Sinusoidal {
                base,
                amplitude,
                period,
            } => Coefficient::Sinusoidal {
                base: f(base),
                amplitude: f(amplitude),
                period: *period,
            },
        }
    }
}

/// Coefficients of one regime.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeCoefficients {
    /// `A_0 … A_r`, each `n × n`.
    pub a: Vec<Coefficient>,
    /// `B_0 … B_r`, each `n × m`.
    pub b: Vec<Coefficient>,
    /// State weight, symmetric `n × n`.
    pub m: Coefficient,
    /// Cross weight, `n × m`.
    pub l: Coefficient,
    /// Control weight, symmetric `m × m`.
    pub r: Coefficient,
}

impl ModeCoefficients {
    pub fn constant(
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        m: DMatrix<f64>,
        l: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Self {
        ModeCoefficients {
            a: a.into_iter().map(Coefficient::Constant).collect(),
            b: b.into_iter().map(Coefficient::Constant).collect(),
            m: Coefficient::Constant(m),
            l: Coefficient::Constant(l),
            r: Coefficient::Constant(r),
        }
    }

    fn all(&self) -> impl Iterator<Item = &Coefficient> {
        self.a
            .iter()
            .chain(self.b.iter())
            .chain([&self.m, &self.l, &self.r])
    }

    pub fn is_constant(&self) -> bool {
        self.all().all(Coefficient::is_constant)
    }
}

/// All coefficient values of one mode at one time, plus the derived blocks.
#[derive(Debug, Clone)]
pub struct CoefficientSnapshot {
    pub partition: BlockPartition,
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub m: SymMatrix,
    pub l: DMatrix<f64>,
    pub r: SymMatrix,
    /// `A_0 + ½ q_ii I`.
    pub a_hat: DMatrix<f64>,
}

impl CoefficientSnapshot {
    pub fn noise_channels(&self) -> usize {
        self.a.len() - 1
    }

    /// Maximizer columns of `B_k`.
    pub fn b_k1(&self, k: usize) -> DMatrix<f64> {
        self.b[k].columns(0, self.partition.m1).into_owned()
    }

    /// Minimizer columns of `B_k`.
    pub fn b_k2(&self, k: usize) -> DMatrix<f64> {
        self.b[k]
            .columns(self.partition.m1, self.partition.m2)
            .into_owned()
    }

    pub fn l1(&self) -> DMatrix<f64> {
        self.l.columns(0, self.partition.m1).into_owned()
    }

    pub fn l2(&self) -> DMatrix<f64> {
        self.l
            .columns(self.partition.m1, self.partition.m2)
            .into_owned()
    }

    pub fn r11(&self) -> SymMatrix {
        self.r.block11(self.partition)
    }

    pub fn r12(&self) -> DMatrix<f64> {
        self.r.block12(self.partition)
    }

    pub fn r22(&self) -> SymMatrix {
        self.r.block22(self.partition)
    }
}

/// A complete problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemData {
    n: usize,
    noise_channels: usize,
    partition: BlockPartition,
    generator: GeneratorMatrix,
    theta: f64,
    modes: Vec<ModeCoefficients>,
}

impl ProblemData {
    /// Checks every dimension against `n`, `m`, `N` and `r`. Sinusoidal
    /// coefficients must all carry the common period `theta`.
    pub fn new(
        n: usize,
        partition: BlockPartition,
        generator: GeneratorMatrix,
        theta: f64,
        modes: Vec<ModeCoefficients>,
    ) -> Result<Self, ProblemError> {
        if n == 0 {
            return Err(invalid("state dimension must be positive"));
        }
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(invalid(format!("period must be positive, got {theta}")));
        }
        if modes.len() != generator.modes() {
            return Err(invalid(format!(
                "{} modes supplied for a {}-state generator",
                modes.len(),
                generator.modes()
            )));
        }
        let m = partition.m();
        let r = modes[0].a.len().checked_sub(1).ok_or_else(|| invalid("mode 1 has no A_0"))?;
        for (i, mode) in modes.iter().enumerate() {
            let tag = |what: &str| format!("modes[{i}].{what}");
            if mode.a.len() != r + 1 || mode.b.len() != r + 1 {
                return Err(invalid(format!(
                    "{}: expected {} A and B matrices, got {} and {}",
                    tag(""),
                    r + 1,
                    mode.a.len(),
                    mode.b.len()
                )));
            }
            for (k, c) in mode.a.iter().enumerate() {
                expect_shape(c, (n, n), &tag(&format!("A[{k}]")))?;
            }
            for (k, c) in mode.b.iter().enumerate() {
                expect_shape(c, (n, m), &tag(&format!("B[{k}]")))?;
            }
            expect_shape(&mode.m, (n, n), &tag("M"))?;
            expect_shape(&mode.l, (n, m), &tag("L"))?;
            expect_shape(&mode.r, (m, m), &tag("R"))?;
            for c in mode.all() {
                if let Coefficient::Sinusoidal { period, .. } = c {
                    if *period != theta {
                        return Err(invalid(format!(
                            "{}: coefficient period {period} differs from theta {theta}",
                            tag("")
                        )));
                    }
                }
                let finite = c.base().iter().chain(c.amplitude().into_iter().flatten());
                if finite.into_iter().any(|v| !v.is_finite()) {
                    return Err(invalid(format!("{}: non-finite coefficient", tag(""))));
                }
            }
        }
        // Symmetric weights are stored symmetrized.
        let sym = |d: &DMatrix<f64>| SymMatrix::symmetrized(d.clone()).into_inner();
        let modes = modes
            .into_iter()
            .map(|mode| ModeCoefficients {
                m: mode.m.map(sym),
                r: mode.r.map(sym),
                ..mode
            })
            .collect();
        Ok(ProblemData {
            n,
            noise_channels: r,
            partition,
            generator,
            theta,
            modes,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.partition.m()
    }

    pub fn noise_channels(&self) -> usize {
        self.noise_channels
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    pub fn partition(&self) -> BlockPartition {
        self.partition
    }

    pub fn generator(&self) -> &GeneratorMatrix {
        &self.generator
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn modes(&self) -> &[ModeCoefficients] {
        &self.modes
    }

    pub fn is_constant(&self) -> bool {
        self.modes.iter().all(ModeCoefficients::is_constant)
    }

    /// Copy of this problem with `M(·, i)` replaced by `M(·, i) + bump(i)`.
    pub fn with_state_weight_bump(&self, bump: &[SymMatrix]) -> Result<Self, ProblemError> {
        if bump.len() != self.mode_count() || bump.iter().any(|b| b.dim() != self.n) {
            return Err(invalid("bump must hold one n x n matrix per mode"));
        }
        let mut out = self.clone();
        for (mode, b) in out.modes.iter_mut().zip(bump) {
            match &mut mode.m {
                Coefficient::Constant(base) | Coefficient::Sinusoidal { base, .. } => {
                    *base += b.as_matrix();
                }
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self, t: f64, mode: usize) -> Result<CoefficientSnapshot, ProblemError> {
        let coeffs = self.modes.get(mode).ok_or(ProblemError::InvalidMode {
            mode,
            modes: self.mode_count(),
        })?;
        let a: Vec<DMatrix<f64>> = coeffs.a.iter().map(|c| c.value(t)).collect();
        let mut a_hat = a[0].clone();
        let half_qii = 0.5 * self.generator.rate(mode, mode);
        for d in 0..self.n {
            a_hat[(d, d)] += half_qii;
        }
        Ok(CoefficientSnapshot {
            partition: self.partition,
            b: coeffs.b.iter().map(|c| c.value(t)).collect(),
            m: SymMatrix::symmetrized(coeffs.m.value(t)),
            l: coeffs.l.value(t),
            r: SymMatrix::symmetrized(coeffs.r.value(t)),
            a,
            a_hat,
        })
    }

    /// Checks the standing assumptions on `grid_points` uniform times in `[0, θ)`.
    pub fn validate_assumptions(&self, grid_points: usize) -> Result<ValidationReport, ProblemError> {
        if grid_points == 0 {
            return Err(invalid("grid_points must be at least 1"));
        }
        let (gen_margin, gen_row) = self.generator.violation();
        let generator = CheckOutcome {
            pass: gen_row.is_none(),
            worst_margin: -gen_margin,
            location: gen_row.map(|i| (0.0, i)),
        };
        let mut r22 = CheckOutcome::new_pass();
        let mut m_psd = CheckOutcome::new_pass();
        for g in 0..grid_points {
            let t = self.theta * g as f64 / grid_points as f64;
            for i in 0..self.mode_count() {
                let snap = self.evaluate(t, i)?;
                let r22_mat = snap.r22();
                let lam = r22_mat.min_eigenvalue()?;
                r22.record(lam, lam > 0.0, t, i);
                if lam > 0.0 {
                    let l2 = snap.l2();
                    let corr = SymIndefinite::factor(&r22_mat)?.solve(&l2.transpose())?;
                    let expr = SymMatrix::symmetrized(snap.m.as_matrix() - &l2 * corr);
                    let mu = expr.min_eigenvalue()?;
                    let tol = 1e-10 * (1.0 + expr.frobenius_norm());
                    m_psd.record(mu, mu >= -tol, t, i);
                }
            }
        }
        if !r22.pass {
            m_psd.pass = false;
        }
        Ok(ValidationReport {
            generator,
            r22_positive: r22,
            state_weight_psd: m_psd,
        })
    }
}

fn expect_shape(c: &Coefficient, want: (usize, usize), path: &str) -> Result<(), ProblemError> {
    if c.shape() != want {
        return Err(invalid(format!(
            "{path}: expected {}x{}, got {}x{}",
            want.0,
            want.1,
            c.shape().0,
            c.shape().1
        )));
    }
    Ok(())
}

/// Outcome of one assumption check: the worst margin seen and where.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub pass: bool,
    pub worst_margin: f64,
    /// `(t, mode)` of the worst margin.
    pub location: Option<(f64, usize)>,
}

impl CheckOutcome {
    fn new_pass() -> Self {
        CheckOutcome {
            pass: true,
            worst_margin: f64::INFINITY,
            location: None,
        }
    }

    fn record(&mut self, margin: f64, ok: bool, t: f64, mode: usize) {
        if margin < self.worst_margin {
            self.worst_margin = margin;
            self.location = Some((t, mode));
        }
        self.pass &= ok;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    /// Row sums and off-diagonal signs of `Q`.
    pub generator: CheckOutcome,
    /// `R22(t,i) ≻ 0`.
    pub r22_positive: CheckOutcome,
    /// `M − L2 R22⁻¹ L2ᵀ ⪰ 0` (with a relative rounding allowance).
    pub state_weight_psd: CheckOutcome,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.generator.pass && self.r22_positive.pass && self.state_weight_psd.pass
    }

    pub fn failures(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !self.generator.pass {
            out.push("generator");
        }
        if !self.r22_positive.pass {
            out.push("r22_positive");
        }
        if !self.state_weight_psd.pass {
            out.push("state_weight_psd");
        }
        out
    }
}

// ---------------------------------------------------------------------------
// File format

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemFile {
    n: usize,
    r: usize,
    m1: usize,
    m2: usize,
    #[serde(rename = "N")]
    modes_count: usize,
    theta: f64,
    #[serde(rename = "Q")]
    q: Rows,
    modes: Vec<ModeFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModeFile {
    #[serde(rename = "A")]
    a: Vec<Rows>,
    #[serde(rename = "B")]
    b: Vec<Rows>,
    #[serde(rename = "M")]
    m: Rows,
    #[serde(rename = "L")]
    l: Rows,
    #[serde(rename = "R")]
    r: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    amplitudes: Option<AmplitudeFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AmplitudeFile {
    #[serde(rename = "A")]
    a: Vec<Rows>,
    #[serde(rename = "B")]
    b: Vec<Rows>,
    #[serde(rename = "M")]
    m: Rows,
    #[serde(rename = "L")]
    l: Rows,
    #[serde(rename = "R")]
    r: Rows,
}

fn parse_matrix(rows: &Rows, path: String) -> Result<DMatrix<f64>, ProblemError> {
    from_rows(rows).map_err(|e| ProblemError::Parse {
        path,
        message: e.to_string(),
    })
}

fn build_coefficient(
    base: &Rows,
    amp: Option<&Rows>,
    theta: f64,
    path: String,
) -> Result<Coefficient, ProblemError> {
    let b = parse_matrix(base, path.clone())?;
    match amp {
        None => Ok(Coefficient::Constant(b)),
        Some(a) => {
            let a = parse_matrix(a, format!("{path} (amplitude)"))?;
            Coefficient::sinusoidal(b, a, theta).map_err(|e| ProblemError::Parse {
                path,
                message: e.to_string(),
            })
        }
    }
}

/// Parses the JSON problem format.
pub fn parse_problem(text: &str) -> Result<ProblemData, ProblemError> {
    let file: ProblemFile = serde_json::from_str(text).map_err(|e| ProblemError::Parse {
        path: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    if file.modes.len() != file.modes_count {
        return Err(ProblemError::Parse {
            path: "modes".into(),
            message: format!("N = {} but {} modes given", file.modes_count, file.modes.len()),
        });
    }
    let partition = BlockPartition::new(file.m1, file.m2)?;
    let q = GeneratorMatrix::new(parse_matrix(&file.q, "Q".into())?)?;
    let theta = file.theta;
    let mut modes = Vec::with_capacity(file.modes.len());
    for (i, mf) in file.modes.iter().enumerate() {
        let amp = mf.amplitudes.as_ref();
        if let Some(a) = amp {
            if a.a.len() != mf.a.len() || a.b.len() != mf.b.len() {
                return Err(ProblemError::Parse {
                    path: format!("modes[{i}].amplitudes"),
                    message: "amplitude set must match the shape of the base set".into(),
                });
            }
        }
        let list = |base: &[Rows], amps: Option<&Vec<Rows>>, name: &str| {
            base.iter()
                .enumerate()
                .map(|(k, rows)| {
                    build_coefficient(
                        rows,
                        amps.map(|v| &v[k]),
                        theta,
                        format!("modes[{i}].{name}[{k}]"),
                    )
                })
                .collect::<Result<Vec<_>, _>>()
        };
        let a = list(&mf.a, amp.map(|x| &x.a), "A")?;
        let b = list(&mf.b, amp.map(|x| &x.b), "B")?;
        let m = build_coefficient(&mf.m, amp.map(|x| &x.m), theta, format!("modes[{i}].M"))?;
        let l = build_coefficient(&mf.l, amp.map(|x| &x.l), theta, format!("modes[{i}].L"))?;
        let r = build_coefficient(&mf.r, amp.map(|x| &x.r), theta, format!("modes[{i}].R"))?;
        modes.push(ModeCoefficients { a, b, m, l, r });
    }
    let p = ProblemData::new(file.n, partition, q, theta, modes)?;
    if p.noise_channels() != file.r {
        return Err(invalid(format!(
            "r = {} but modes carry {} noise channels",
            file.r,
            p.noise_channels()
        )));
    }
    Ok(p)
}

/// Serializes to the JSON problem format (pretty-printed).
pub fn serialize_problem(p: &ProblemData) -> String {
    let modes = p
        .modes
        .iter()
        .map(|mode| {
            let amp_or_zero = |c: &Coefficient| match c.amplitude() {
                Some(a) => to_rows(a),
                None => to_rows(&DMatrix::zeros(c.shape().0, c.shape().1)),
            };
            let amplitudes = (!mode.is_constant()).then(|| AmplitudeFile {
                a: mode.a.iter().map(amp_or_zero).collect(),
                b: mode.b.iter().map(amp_or_zero).collect(),
                m: amp_or_zero(&mode.m),
                l: amp_or_zero(&mode.l),
                r: amp_or_zero(&mode.r),
            });
            ModeFile {
                a: mode.a.iter().map(|c| to_rows(c.base())).collect(),
                b: mode.b.iter().map(|c| to_rows(c.base())).collect(),
                m: to_rows(mode.m.base()),
                l: to_rows(mode.l.base()),
                r: to_rows(mode.r.base()),
                amplitudes,
            }
        })
        .collect();
    let file = ProblemFile {
        n: p.n,
        r: p.noise_channels,
        m1: p.partition.m1,
        m2: p.partition.m2,
        modes_count: p.mode_count(),
        theta: p.theta,
        q: to_rows(p.generator.as_matrix()),
        modes,
    };
    serde_json::to_string_pretty(&file).expect("problem serialization is infallible")
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn m1x1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    /// Scalar state, scalar players, `r = 0`, `N = 1`.
    pub(crate) fn scalar_problem(q: f64, a0: f64, m: f64, l: [f64; 2], r: [f64; 3]) -> ProblemData {
        let mode = ModeCoefficients::constant(
            vec![m1x1(a0)],
            vec![DMatrix::from_row_slice(1, 2, &[1.0, 1.0])],
            m1x1(m),
            DMatrix::from_row_slice(1, 2, &l),
            DMatrix::from_row_slice(2, 2, &[r[0], r[1], r[1], r[2]]),
        );
        ProblemData::new(
            1,
            BlockPartition::new(1, 1).unwrap(),
            GeneratorMatrix::new(m1x1(q)).unwrap(),
            1.0,
            vec![mode],
        )
        .unwrap()
    }

    fn two_mode(q: [f64; 4], m: f64, l2: f64, r22: f64) -> ProblemData {
        let mode = ModeCoefficients::constant(
            vec![m1x1(-1.0)],
            vec![DMatrix::from_row_slice(1, 2, &[1.0, 1.0])],
            m1x1(m),
            DMatrix::from_row_slice(1, 2, &[0.0, l2]),
            DMatrix::from_row_slice(2, 2, &[-7.0, 0.0, 0.0, r22]),
        );
        ProblemData::new(
            1,
            BlockPartition::new(1, 1).unwrap(),
            GeneratorMatrix::new(DMatrix::from_row_slice(2, 2, &q)).unwrap(),
            1.0,
            vec![mode.clone(), mode],
        )
        .unwrap()
    }

    #[test]
    fn validation_boundary_case_passes() {
        let p = two_mode([-1.0, 1.0, 2.0, -2.0], 1.0, 2.0, 4.0);
        let rep = p.validate_assumptions(8).unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert!(rep.state_weight_psd.worst_margin.abs() < 1e-14);
    }

    #[test]
    fn validation_row_sum_violation() {
        let p = two_mode([-1.0, 0.5, 2.0, -2.0], 1.0, 2.0, 4.0);
        let rep = p.validate_assumptions(4).unwrap();
        assert!(!rep.generator.pass);
        assert_eq!(rep.generator.location.unwrap().1, 0);
        assert!((rep.generator.worst_margin + 0.5).abs() < 1e-15);
        assert_eq!(rep.failures(), vec!["generator"]);
    }

    #[test]
    fn validation_state_weight_violation() {
        let p = two_mode([-1.0, 1.0, 2.0, -2.0], 0.5, 2.0, 4.0);
        let rep = p.validate_assumptions(4).unwrap();
        assert!(!rep.state_weight_psd.pass);
        assert!((rep.state_weight_psd.worst_margin + 0.5).abs() < 1e-14);
    }

    #[test]
    fn validation_r22_violation() {
        let p = two_mode([-1.0, 1.0, 2.0, -2.0], 1.0, 0.0, -1.0);
        let rep = p.validate_assumptions(4).unwrap();
        assert!(!rep.r22_positive.pass);
        assert!(!rep.passed());
    }

    #[test]
    fn validation_needs_grid() {
        let p = scalar_problem(0.0, -1.0, 1.0, [0.0, 0.0], [-7.0, 0.0, 4.0]);
        assert!(p.validate_assumptions(0).is_err());
    }

    #[test]
    fn evaluate_constant_and_a_hat() {
        let p = scalar_problem(0.0, -1.0, 1.0, [0.0, 0.0], [-7.0, 0.0, 4.0]);
        let s0 = p.evaluate(0.0, 0).unwrap();
        let s1 = p.evaluate(0.37, 0).unwrap();
        assert_eq!(s0.a, s1.a);
        assert_eq!(s0.r, s1.r);
        assert_eq!(s0.r.get(0, 0), -7.0);
        assert!(matches!(
            p.evaluate(0.0, 1),
            Err(ProblemError::InvalidMode { mode: 1, modes: 1 })
        ));

        let mode = ModeCoefficients::constant(
            vec![m1x1(-1.0)],
            vec![DMatrix::from_row_slice(1, 2, &[1.0, 1.0])],
            m1x1(1.0),
            DMatrix::zeros(1, 2),
            DMatrix::from_row_slice(2, 2, &[-7.0, 0.0, 0.0, 4.0]),
        );
        let p = ProblemData::new(
            1,
            BlockPartition::new(1, 1).unwrap(),
            GeneratorMatrix::new(DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0])).unwrap(),
            1.0,
            vec![mode.clone(), mode],
        )
        .unwrap();
        assert_eq!(p.evaluate(0.0, 0).unwrap().a_hat[(0, 0)], -1.5);
    }

    #[test]
    fn sinusoid_quarter_period() {
        let c = Coefficient::sinusoidal(m1x1(2.0), m1x1(0.5), 1.0).unwrap();
        assert!((c.value(0.25)[(0, 0)] - 2.5).abs() < 1e-15);
        assert_eq!(c.value(0.0)[(0, 0)], 2.0);
        // zero amplitude collapses
        assert!(Coefficient::sinusoidal(m1x1(2.0), m1x1(0.0), 1.0)
            .unwrap()
            .is_constant());
    }

    #[test]
    fn sinusoid_is_periodic_at_dyadic_times() {
        let c = Coefficient::sinusoidal(m1x1(2.0), m1x1(0.5), 1.0).unwrap();
        for k in 0..64 {
            let t = k as f64 / 64.0;
            assert_eq!(c.value(t), c.value(t + 1.0));
            assert_eq!(c.value(t), c.value(t + 3.0));
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mode = ModeCoefficients::constant(
            vec![m1x1(-1.0)],
            vec![DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0])],
            m1x1(1.0),
            DMatrix::zeros(1, 2),
            DMatrix::identity(2, 2),
        );
        let err = ProblemData::new(
            1,
            BlockPartition::new(1, 1).unwrap(),
            GeneratorMatrix::new(m1x1(0.0)).unwrap(),
            1.0,
            vec![mode],
        )
        .unwrap_err();
        assert!(err.to_string().contains("B[0]"), "{err}");
    }

    const MINIMAL: &str = r#"{
        "n": 1, "r": 0, "m1": 1, "m2": 1, "N": 1, "theta": 1.0,
        "Q": [[0.0]],
        "modes": [ { "A": [[[-1.0]]], "B": [[[1.0, 1.0]]], "M": [[1.0]],
                     "L": [[0.0, 0.0]], "R": [[-7.0, 0.0], [0.0, 4.0]] } ]
    }"#;

    #[test]
    fn parse_minimal_file() {
        let p = parse_problem(MINIMAL).unwrap();
        assert_eq!((p.n(), p.m(), p.mode_count(), p.noise_channels()), (1, 2, 1, 0));
        assert!(p.is_constant());
        assert_eq!(p, scalar_problem(0.0, -1.0, 1.0, [0.0, 0.0], [-7.0, 0.0, 4.0]));
    }

    #[test]
    fn parse_missing_field() {
        let text = MINIMAL.replace(r#", "R": [[-7.0, 0.0], [0.0, 4.0]]"#, "");
        let err = parse_problem(&text).unwrap_err();
        assert!(matches!(err, ProblemError::Parse { .. }));
        assert!(err.to_string().contains("`R`"), "{err}");
    }

    #[test]
    fn parse_resymmetrizes() {
        let text = MINIMAL.replace("[[-7.0, 0.0], [0.0, 4.0]]", "[[-7.0, 0.2], [0.0, 4.0]]");
        let p = parse_problem(&text).unwrap();
        let r = p.modes()[0].r.base();
        assert_eq!(r[(0, 1)], 0.1);
        assert_eq!(r[(1, 0)], 0.1);
    }

    #[test]
    fn parse_rejects_bad_shapes() {
        let text = MINIMAL.replace(r#""M": [[1.0]]"#, r#""M": [[1.0, 2.0]]"#);
        assert!(matches!(
            parse_problem(&text),
            Err(ProblemError::InvalidProblem(_))
        ));
        let text = MINIMAL.replace(r#""r": 0"#, r#""r": 1"#);
        assert!(parse_problem(&text).is_err());
        let text = MINIMAL.replace(r#""N": 1"#, r#""N": 2"#);
        assert!(parse_problem(&text).is_err());
    }

    fn arb_problem() -> impl Strategy<Value = ProblemData> {
        (1usize..3, 1usize..3, 0usize..2, 1usize..3, any::<bool>()).prop_flat_map(
            |(n, big_n, r, m1, periodic)| {
                let m = m1 + 1;
                let count = big_n * ((r + 1) * (n * n + n * m) + n * n + n * m + m * m);
                (
                    prop::collection::vec(-3.0f64..3.0, count),
                    prop::collection::vec(-1.0f64..1.0, count),
                    prop::collection::vec(0.0f64..2.0, big_n * big_n),
                )
                    .prop_map(move |(base, amp, rates)| {
                        let mut it = base.into_iter();
                        let mut at = amp.into_iter();
                        let theta = 0.75;
                        let mut take = |rows: usize, cols: usize| {
                            let b = DMatrix::from_fn(rows, cols, |_, _| it.next().unwrap());
                            let a = DMatrix::from_fn(rows, cols, |_, _| at.next().unwrap());
                            if periodic {
                                Coefficient::sinusoidal(b, a, theta).unwrap()
                            } else {
                                Coefficient::Constant(b)
                            }
                        };
                        let modes = (0..big_n)
                            .map(|_| ModeCoefficients {
                                a: (0..=r).map(|_| take(n, n)).collect(),
                                b: (0..=r).map(|_| take(n, m)).collect(),
                                m: take(n, n),
                                l: take(n, m),
                                r: take(m, m),
                            })
                            .collect();
                        let mut q = DMatrix::from_fn(big_n, big_n, |i, j| rates[i * big_n + j]);
                        for i in 0..big_n {
                            let off: f64 = (0..big_n).filter(|&j| j != i).map(|j| q[(i, j)]).sum();
                            q[(i, i)] = -off;
                        }
                        ProblemData::new(
                            n,
                            BlockPartition::new(m1, 1).unwrap(),
                            GeneratorMatrix::new(q).unwrap(),
                            theta,
                            modes,
                        )
                        .unwrap()
                    })
            },
        )
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(p in arb_problem()) {
            let text = serialize_problem(&p);
            let back = parse_problem(&text).unwrap();
            prop_assert_eq!(back, p);
        }

        #[test]
        fn evaluate_is_periodic(p in arb_problem(), k in 0u32..256) {
            let t = p.theta() * k as f64 / 256.0;
            for i in 0..p.mode_count() {
                let a = p.evaluate(t, i).unwrap();
                let b = p.evaluate(t + p.theta(), i).unwrap();
                prop_assert_eq!(&a.a, &b.a);
                prop_assert_eq!(&a.b, &b.b);
                prop_assert_eq!(&a.m, &b.m);
                prop_assert_eq!(&a.l, &b.l);
                prop_assert_eq!(&a.r, &b.r);
            }
        }
    }
}
