//! Dense symmetric-matrix utilities.
//!
//! Everything downstream works with small dense matrices (a few dozen rows at
//! most), so the types here wrap `nalgebra::DMatrix<f64>` and keep symmetry as a
//! hard invariant: every constructor and every arithmetic result is passed
//! through `(S + Sᵀ) / 2`.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("singular lower-right block (smallest |eigenvalue| {min_abs_eig:e}, threshold {threshold:e})")]
    SingularBlock { min_abs_eig: f64, threshold: f64 },
    #[error("singular matrix in symmetric indefinite factorization (pivot {pivot})")]
    SingularFactor { pivot: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Real symmetric `n × n` matrix with exactly symmetric storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Builds a symmetric matrix from a square input, averaging the two triangles.
    pub fn new(m: DMatrix<f64>) -> Result<Self, LinalgError> {
        if m.nrows() == 0 || m.nrows() != m.ncols() {
            return Err(LinalgError::InvalidMatrix(format!(
                "expected a nonempty square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::InvalidMatrix("non-finite entry".into()));
        }
        Ok(Self::symmetrized(m))
    }

    /// Symmetrizes without validation. Callers guarantee a square, finite input.
    pub(crate) fn symmetrized(m: DMatrix<f64>) -> Self {
        debug_assert_eq!(m.nrows(), m.ncols());
        let mut s = m;
        let n = s.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (s[(i, j)] + s[(j, i)]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        SymMatrix(s)
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix(DMatrix::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        let n = d.len();
        SymMatrix(DMatrix::from_fn(n, n, |i, j| if i == j { d[i] } else { 0.0 }))
    }

    pub fn scalar(v: f64) -> Self {
        SymMatrix(DMatrix::from_element(1, 1, v))
    }

    pub fn from_row_slice(n: usize, data: &[f64]) -> Result<Self, LinalgError> {
        if data.len() != n * n {
            return Err(LinalgError::DimensionMismatch(format!(
                "{} entries for a {n}x{n} matrix",
                data.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(n, n, data))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn scale(&self, c: f64) -> Self {
        SymMatrix(&self.0 * c)
    }

    pub fn shift(&self, c: f64) -> Self {
        let mut m = self.0.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += c;
        }
        SymMatrix(m)
    }

    /// `Bᵀ S B`, re-symmetrized.
    pub fn congruence(&self, b: &DMatrix<f64>) -> Self {
        Self::symmetrized(b.transpose() * &self.0 * b)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    fn check_finite(&self) -> Result<(), LinalgError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(LinalgError::InvalidMatrix("non-finite entry".into()))
        }
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Result<Vec<f64>, LinalgError> {
        self.check_finite()?;
        let eig = SymmetricEigen::try_new(self.0.clone(), f64::EPSILON, 0).ok_or_else(|| {
            LinalgError::InvalidMatrix("symmetric eigensolver did not converge".into())
        })?;
        let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        Ok(v)
    }

    pub fn min_eigenvalue(&self) -> Result<f64, LinalgError> {
        Ok(self.eigenvalues()?[0])
    }

    pub fn max_eigenvalue(&self) -> Result<f64, LinalgError> {
        Ok(*self.eigenvalues()?.last().expect("n >= 1"))
    }

    /// Counts eigenvalues above `tol`, below `-tol`, and inside the band.
    pub fn signature(&self, tol: f64) -> Result<Inertia, LinalgError> {
        let mut inertia = Inertia::default();
        for l in self.eigenvalues()? {
            if l > tol {
                inertia.positive += 1;
            } else if l < -tol {
                inertia.negative += 1;
            } else {
                inertia.zero += 1;
            }
        }
        Ok(inertia)
    }

    /// Upper-left `m1 × m1` block.
    pub fn block11(&self, p: BlockPartition) -> SymMatrix {
        SymMatrix(self.0.view((0, 0), (p.m1, p.m1)).into_owned())
    }

    /// Off-diagonal `m1 × m2` block.
    pub fn block12(&self, p: BlockPartition) -> DMatrix<f64> {
        self.0.view((0, p.m1), (p.m1, p.m2)).into_owned()
    }

    /// Lower-right `m2 × m2` block.
    pub fn block22(&self, p: BlockPartition) -> SymMatrix {
        SymMatrix(self.0.view((p.m1, p.m1), (p.m2, p.m2)).into_owned())
    }

    /// `S11 − S12 · S22⁻¹ · S12ᵀ`.
    pub fn schur_lower(&self, p: BlockPartition) -> Result<SymMatrix, LinalgError> {
        if self.dim() != p.m() {
            return Err(LinalgError::DimensionMismatch(format!(
                "matrix is {0}x{0}, partition expects {1}",
                self.dim(),
                p.m()
            )));
        }
        let s22 = self.block22(p);
        let eig = s22.eigenvalues()?;
        let min_abs = eig.iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
        let threshold = 1e-12 * (1.0 + s22.frobenius_norm());
        if min_abs < threshold {
            return Err(LinalgError::SingularBlock {
                min_abs_eig: min_abs,
                threshold,
            });
        }
        let s12 = self.block12(p);
        let factor = SymIndefinite::factor(&s22)?;
        let solved = factor.solve(&s12.transpose())?;
        Ok(Self::symmetrized(self.block11(p).0 - s12 * solved))
    }
}

impl Add for &SymMatrix {
    type Output = SymMatrix;
    fn add(self, rhs: &SymMatrix) -> SymMatrix {
        SymMatrix::symmetrized(&self.0 + &rhs.0)
    }
}

impl Sub for &SymMatrix {
    type Output = SymMatrix;
    fn sub(self, rhs: &SymMatrix) -> SymMatrix {
        SymMatrix::symmetrized(&self.0 - &rhs.0)
    }
}

impl Neg for &SymMatrix {
    type Output = SymMatrix;
    fn neg(self) -> SymMatrix {
        SymMatrix(-&self.0)
    }
}

impl Mul<f64> for &SymMatrix {
    type Output = SymMatrix;
    fn mul(self, rhs: f64) -> SymMatrix {
        self.scale(rhs)
    }
}

impl Serialize for SymMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        to_rows(&self.0).serialize(s)
    }
}

impl<'de> Deserialize<'de> for SymMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let m = from_rows(&rows).map_err(serde::de::Error::custom)?;
        SymMatrix::new(m).map_err(serde::de::Error::custom)
    }
}

/// Row-major nested vector view of a matrix.
pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Parses a row-major nested array. All rows must share one length.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, LinalgError> {
    let nrows = rows.len();
    if nrows == 0 {
        return Err(LinalgError::InvalidMatrix("matrix has no rows".into()));
    }
    let ncols = rows[0].len();
    if ncols == 0 {
        return Err(LinalgError::InvalidMatrix("matrix has no columns".into()));
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(LinalgError::DimensionMismatch(format!(
            "row {i} has {} entries, expected {ncols}",
            r.len()
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(LinalgError::InvalidMatrix("non-finite entry".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Eigenvalue sign counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inertia {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

impl Inertia {
    pub fn new(positive: usize, negative: usize, zero: usize) -> Self {
        Inertia {
            positive,
            negative,
            zero,
        }
    }
}

/// Column split `m = m1 + m2` of the control space (maximizer first, minimizer second).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub m1: usize,
    pub m2: usize,
}

impl BlockPartition {
    pub fn new(m1: usize, m2: usize) -> Result<Self, LinalgError> {
        if m1 == 0 || m2 == 0 {
            return Err(LinalgError::InvalidMatrix(format!(
                "partition blocks must be nonempty (m1={m1}, m2={m2})"
            )));
        }
        Ok(BlockPartition { m1, m2 })
    }

    pub fn m(&self) -> usize {
        self.m1 + self.m2
    }

    /// The inertia of `diag(−I_m1, I_m2)`.
    pub fn game_inertia(&self) -> Inertia {
        Inertia::new(self.m2, self.m1, 0)
    }
}

#[derive(Debug, Clone)]
enum Pivot {
    One(f64),
    Two([f64; 3]),
}

/// Symmetric indefinite `P A Pᵀ = L D Lᵀ` factorization with Bunch–Kaufman
/// partial pivoting (1×1 and 2×2 diagonal blocks).
#[derive(Debug, Clone)]
pub struct SymIndefinite {
    n: usize,
    // Unit lower-triangular factor, stored densely.
    lower: DMatrix<f64>,
    pivots: Vec<(usize, Pivot)>,
    perm: Vec<usize>,
}

impl SymIndefinite {
    pub fn factor(s: &SymMatrix) -> Result<Self, LinalgError> {
        s.check_finite()?;
        let n = s.dim();
        let alpha = (1.0 + 17f64.sqrt()) / 8.0;
        let mut a = s.0.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut pivots = Vec::new();
        let scale = s.max_abs().max(f64::MIN_POSITIVE);

        let swap = |a: &mut DMatrix<f64>, perm: &mut Vec<usize>, i: usize, j: usize| {
            if i != j {
                a.swap_rows(i, j);
                a.swap_columns(i, j);
                perm.swap(i, j);
            }
        };

        let mut k = 0;
        while k < n {
            let absakk = a[(k, k)].abs();
            let (imax, colmax) = ((k + 1)..n)
                .map(|i| (i, a[(i, k)].abs()))
                .fold((k, 0.0), |best, c| if c.1 > best.1 { c } else { best });

            if absakk.max(colmax) <= f64::EPSILON * scale {
                return Err(LinalgError::SingularFactor { pivot: k });
            }

            let two_by_two = if absakk >= alpha * colmax {
                false
            } else {
                let rowmax = (k..n)
                    .filter(|&j| j != imax)
                    .map(|j| a[(imax, j)].abs())
                    .fold(0.0, f64::max);
                if absakk * rowmax >= alpha * colmax * colmax {
                    false
                } else if a[(imax, imax)].abs() >= alpha * rowmax {
                    swap(&mut a, &mut perm, k, imax);
                    false
                } else {
                    swap(&mut a, &mut perm, k + 1, imax);
                    true
                }
            };

            if !two_by_two {
                let d = a[(k, k)];
                for i in (k + 1)..n {
                    a[(i, k)] /= d;
                }
                for j in (k + 1)..n {
                    let ljk = a[(j, k)];
                    for i in j..n {
                        let v = a[(i, j)] - a[(i, k)] * d * ljk;
                        a[(i, j)] = v;
                        a[(j, i)] = v;
                    }
                }
                pivots.push((k, Pivot::One(d)));
                k += 1;
            } else {
                let d11 = a[(k, k)];
                let d21 = a[(k + 1, k)];
                let d22 = a[(k + 1, k + 1)];
                let det = d11 * d22 - d21 * d21;
                if det.abs() <= f64::EPSILON * scale * scale {
                    return Err(LinalgError::SingularFactor { pivot: k });
                }
                // Multipliers [l1 l2] = [a_ik a_ik1] D⁻¹.
                for i in (k + 2)..n {
                    let x = a[(i, k)];
                    let y = a[(i, k + 1)];
                    let l1 = (x * d22 - y * d21) / det;
                    let l2 = (y * d11 - x * d21) / det;
                    a[(i, k)] = l1;
                    a[(i, k + 1)] = l2;
                }
                for j in (k + 2)..n {
                    let (lj1, lj2) = (a[(j, k)], a[(j, k + 1)]);
                    let wj1 = lj1 * d11 + lj2 * d21;
                    let wj2 = lj1 * d21 + lj2 * d22;
                    for i in j..n {
                        let v = a[(i, j)] - a[(i, k)] * wj1 - a[(i, k + 1)] * wj2;
                        a[(i, j)] = v;
                        a[(j, i)] = v;
                    }
                }
                pivots.push((k, Pivot::Two([d11, d21, d22])));
                k += 2;
            }
        }

        let mut lower = DMatrix::identity(n, n);
        for (start, piv) in &pivots {
            let width = match piv {
                Pivot::One(_) => 1,
                Pivot::Two(_) => 2,
            };
            for c in *start..(*start + width) {
                for i in (*start + width)..n {
                    lower[(i, c)] = a[(i, c)];
                }
            }
        }
        Ok(SymIndefinite {
            n,
            lower,
            pivots,
            perm,
        })
    }

    /// Inertia read off the block-diagonal factor (Sylvester's law).
    pub fn inertia(&self, tol: f64) -> Inertia {
        let mut out = Inertia::default();
        let mut count = |v: f64| {
            if v > tol {
                out.positive += 1;
            } else if v < -tol {
                out.negative += 1;
            } else {
                out.zero += 1;
            }
        };
        for (_, p) in &self.pivots {
            match p {
                Pivot::One(d) => count(*d),
                Pivot::Two([a, b, c]) => {
                    let mean = 0.5 * (a + c);
                    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
                    count(mean - rad);
                    count(mean + rad);
                }
            }
        }
        out
    }

    /// Solves `S X = rhs` column by column.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
        if rhs.nrows() != self.n {
            return Err(LinalgError::DimensionMismatch(format!(
                "rhs has {} rows, factor is {}x{}",
                rhs.nrows(),
                self.n,
                self.n
            )));
        }
        let n = self.n;
        // y = P rhs
        let mut y = DMatrix::from_fn(n, rhs.ncols(), |i, j| rhs[(self.perm[i], j)]);
        for c in 0..y.ncols() {
            // forward: L z = y
            for i in 0..n {
                let mut v = y[(i, c)];
                for k in 0..i {
                    v -= self.lower[(i, k)] * y[(k, c)];
                }
                y[(i, c)] = v;
            }
            // block diagonal
            for (start, p) in &self.pivots {
                match p {
                    Pivot::One(d) => y[(*start, c)] /= d,
                    Pivot::Two([a, b, d]) => {
                        let det = a * d - b * b;
                        let u = y[(*start, c)];
                        let v = y[(*start + 1, c)];
                        y[(*start, c)] = (d * u - b * v) / det;
                        y[(*start + 1, c)] = (a * v - b * u) / det;
                    }
                }
            }
            // backward: Lᵀ w = z
            for i in (0..n).rev() {
                let mut v = y[(i, c)];
                for k in (i + 1)..n {
                    v -= self.lower[(k, i)] * y[(k, c)];
                }
                y[(i, c)] = v;
            }
        }
        // x = Pᵀ w
        let mut x = DMatrix::zeros(n, rhs.ncols());
        for i in 0..n {
            for c in 0..rhs.ncols() {
                x[(self.perm[i], c)] = y[(i, c)];
            }
        }
        Ok(x)
    }

    pub fn inverse(&self) -> Result<SymMatrix, LinalgError> {
        Ok(SymMatrix::symmetrized(
            self.solve(&DMatrix::identity(self.n, self.n))?,
        ))
    }
}

/// Frobenius distance between two matrices of equal shape.
pub fn frobenius_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sym(n: usize, v: &[f64]) -> SymMatrix {
        SymMatrix::from_row_slice(n, v).unwrap()
    }

    #[test]
    fn min_eigenvalue_examples() {
        assert_eq!(SymMatrix::identity(2).min_eigenvalue().unwrap(), 1.0);
        assert_eq!(
            SymMatrix::from_diagonal(&[-7.0, 4.0]).min_eigenvalue().unwrap(),
            -7.0
        );
        let m = sym(2, &[2.0, 1.0, 1.0, 2.0]);
        assert!((m.min_eigenvalue().unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn non_finite_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, f64::NAN, 0.0, 1.0]);
        assert!(matches!(
            SymMatrix::new(m),
            Err(LinalgError::InvalidMatrix(_))
        ));
        // Bypassing the constructor still trips the eigen path.
        let bad = SymMatrix(DMatrix::from_element(1, 1, f64::INFINITY));
        assert!(bad.min_eigenvalue().is_err());
        assert!(bad.signature(1e-9).is_err());
    }

    #[test]
    fn signature_examples() {
        let d = SymMatrix::from_diagonal(&[-7.0, 4.0]);
        assert_eq!(d.signature(1e-9).unwrap(), Inertia::new(1, 1, 0));
        assert_eq!(
            SymMatrix::zeros(3).signature(1e-9).unwrap(),
            Inertia::new(0, 0, 3)
        );
        let band = SymMatrix::from_diagonal(&[1.0, 1.0, -1e-12]);
        assert_eq!(band.signature(1e-9).unwrap(), Inertia::new(2, 0, 1));
    }

    #[test]
    fn schur_examples() {
        let p = BlockPartition::new(1, 1).unwrap();
        let s = SymMatrix::from_diagonal(&[-7.0, 4.0]);
        assert_eq!(s.schur_lower(p).unwrap().get(0, 0), -7.0);
        let s = sym(2, &[-7.0, 0.1, 0.1, 4.0]);
        assert!((s.schur_lower(p).unwrap().get(0, 0) + 7.0025).abs() < 1e-14);
        let s = SymMatrix::from_diagonal(&[-1.0, 0.0]);
        assert!(matches!(
            s.schur_lower(p),
            Err(LinalgError::SingularBlock { .. })
        ));
    }

    #[test]
    fn partition_rejects_empty_blocks() {
        assert!(BlockPartition::new(0, 2).is_err());
        assert!(BlockPartition::new(2, 0).is_err());
        assert_eq!(BlockPartition::new(2, 3).unwrap().m(), 5);
    }

    #[test]
    fn indefinite_factor_needs_two_by_two_pivot() {
        // Zero diagonal forces a 2x2 block.
        let s = sym(3, &[0.0, 1.0, 2.0, 1.0, 0.0, 3.0, 2.0, 3.0, 0.0]);
        let f = SymIndefinite::factor(&s).unwrap();
        let x = f.solve(&DMatrix::identity(3, 3)).unwrap();
        let prod = s.as_matrix() * &x;
        assert!((prod - DMatrix::<f64>::identity(3, 3)).norm() < 1e-13);
        assert_eq!(f.inertia(1e-12), s.signature(1e-12).unwrap());
    }

    #[test]
    fn indefinite_factor_singular() {
        let s = SymMatrix::zeros(2);
        assert!(SymIndefinite::factor(&s).is_err());
    }

    fn arb_sym(max_n: usize) -> impl Strategy<Value = SymMatrix> {
        (1..=max_n).prop_flat_map(|n| {
            prop::collection::vec(-5.0f64..5.0, n * n)
                .prop_map(move |v| SymMatrix::from_row_slice(n, &v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn signature_counts_and_negation(s in arb_sym(6)) {
            let a = s.signature(1e-9).unwrap();
            prop_assert_eq!(a.positive + a.negative + a.zero, s.dim());
            let b = (-&s).signature(1e-9).unwrap();
            prop_assert_eq!(a.positive, b.negative);
            prop_assert_eq!(a.negative, b.positive);
        }

        #[test]
        fn shift_moves_min_eigenvalue(s in arb_sym(6), c in -10.0f64..10.0) {
            let lhs = s.shift(c).min_eigenvalue().unwrap();
            let rhs = s.min_eigenvalue().unwrap() + c;
            prop_assert!((lhs - rhs).abs() <= 1e-10);
        }

        #[test]
        fn schur_of_block_diagonal_is_upper_block(
            a in arb_sym(3),
            d in prop::collection::vec(1.0f64..5.0, 1..4),
        ) {
            let (m1, m2) = (a.dim(), d.len());
            let p = BlockPartition::new(m1, m2).unwrap();
            let mut full = DMatrix::zeros(m1 + m2, m1 + m2);
            full.view_mut((0, 0), (m1, m1)).copy_from(a.as_matrix());
            for (k, v) in d.iter().enumerate() {
                full[(m1 + k, m1 + k)] = *v;
            }
            let s = SymMatrix::new(full).unwrap();
            prop_assert_eq!(s.schur_lower(p).unwrap(), a);
        }

        #[test]
        fn indefinite_solve_matches_inverse(s in arb_sym(7)) {
            let eig = s.eigenvalues().unwrap();
            let min_abs = eig.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
            prop_assume!(min_abs > 1e-3);
            let f = SymIndefinite::factor(&s).unwrap();
            let inv = f.inverse().unwrap();
            let err = (s.as_matrix() * inv.as_matrix() - DMatrix::<f64>::identity(s.dim(), s.dim())).norm();
            prop_assert!(err < 1e-8 * (1.0 + 1.0 / min_abs));
            prop_assert_eq!(f.inertia(1e-12), s.signature(1e-12).unwrap());
        }
    }
}
