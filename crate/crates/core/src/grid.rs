//! Periodic grid functions with values in `S_n^N`.

use serde::{Deserialize, Serialize};

use crate::linalg::{LinalgError, SymMatrix};

/// An `N`-tuple of symmetric `n × n` matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<SymMatrix>", into = "Vec<SymMatrix>")]
pub struct ModeSymTuple(Vec<SymMatrix>);

impl TryFrom<Vec<SymMatrix>> for ModeSymTuple {
    type Error = LinalgError;
    fn try_from(v: Vec<SymMatrix>) -> Result<Self, LinalgError> {
        ModeSymTuple::new(v)
    }
}

impl From<ModeSymTuple> for Vec<SymMatrix> {
    fn from(t: ModeSymTuple) -> Self {
        t.0
    }
}

impl ModeSymTuple {
    pub fn new(parts: Vec<SymMatrix>) -> Result<Self, LinalgError> {
        let Some(first) = parts.first() else {
            return Err(LinalgError::DimensionMismatch("empty mode tuple".into()));
        };
        let n = first.dim();
        if parts.iter().any(|p| p.dim() != n) {
            return Err(LinalgError::DimensionMismatch(
                "mode tuple components differ in size".into(),
            ));
        }
        Ok(ModeSymTuple(parts))
    }

    pub fn zeros(n: usize, modes: usize) -> Self {
        ModeSymTuple(vec![SymMatrix::zeros(n); modes])
    }

    pub fn modes(&self) -> usize {
        self.0.len()
    }

    pub fn dim(&self) -> usize {
        self.0[0].dim()
    }

    pub fn get(&self, i: usize) -> &SymMatrix {
        &self.0[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, SymMatrix> {
        self.0.iter()
    }

    pub fn as_slice(&self) -> &[SymMatrix] {
        &self.0
    }

    pub fn map(&self, f: impl Fn(&SymMatrix) -> SymMatrix) -> Self {
        ModeSymTuple(self.0.iter().map(f).collect())
    }

    /// `max_i ‖self(i) − other(i)‖_F`.
    pub fn max_frobenius_distance(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a.as_matrix() - b.as_matrix()).norm())
            .fold(0.0, f64::max)
    }

    pub fn max_frobenius_norm(&self) -> f64 {
        self.0.iter().map(SymMatrix::frobenius_norm).fold(0.0, f64::max)
    }
}

/// Samples of one mode over one period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSamples {
    /// Values at `t_g = gθ/G`.
    pub samples: Vec<SymMatrix>,
    /// Values at `t_g + θ/(2G)`.
    pub half_samples: Vec<SymMatrix>,
}

impl ModeSamples {
    pub fn constant(value: SymMatrix, grid_points: usize) -> Self {
        ModeSamples {
            samples: vec![value.clone(); grid_points],
            half_samples: vec![value; grid_points],
        }
    }

    /// Node `j ∈ 0..2G`: even nodes are full-step samples, odd nodes half-steps.
    pub fn node(&self, j: usize) -> &SymMatrix {
        if j % 2 == 0 {
            &self.samples[j / 2]
        } else {
            &self.half_samples[j / 2]
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = &SymMatrix> {
        (0..2 * self.samples.len()).map(move |j| self.node(j))
    }
}

/// A θ-periodic function `t ↦ X(t)` sampled on `2G` equispaced nodes
/// (full and half grid steps), interpolated by local cubics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSolution {
    pub theta: f64,
    pub grid_points: usize,
    pub modes: Vec<ModeSamples>,
}

impl GridSolution {
    pub fn zeros(n: usize, mode_count: usize, grid_points: usize, theta: f64) -> Self {
        GridSolution {
            theta,
            grid_points,
            modes: vec![ModeSamples::constant(SymMatrix::zeros(n), grid_points); mode_count],
        }
    }

    pub fn constant(value: &ModeSymTuple, grid_points: usize, theta: f64) -> Self {
        GridSolution {
            theta,
            grid_points,
            modes: value
                .iter()
                .map(|v| ModeSamples::constant(v.clone(), grid_points))
                .collect(),
        }
    }

    /// Checks sample counts, common dimension and finiteness.
    pub fn check_shape(&self, n: usize, mode_count: usize) -> Result<(), LinalgError> {
        if self.grid_points < 2 || !(self.theta > 0.0) {
            return Err(LinalgError::DimensionMismatch(format!(
                "grid needs G >= 2 and theta > 0 (G = {}, theta = {})",
                self.grid_points, self.theta
            )));
        }
        if self.modes.len() != mode_count {
            return Err(LinalgError::DimensionMismatch(format!(
                "{} modes in solution, problem has {mode_count}",
                self.modes.len()
            )));
        }
        for (i, m) in self.modes.iter().enumerate() {
            if m.samples.len() != self.grid_points || m.half_samples.len() != self.grid_points {
                return Err(LinalgError::DimensionMismatch(format!(
                    "mode {}: expected {} samples and half samples",
                    i + 1,
                    self.grid_points
                )));
            }
            if let Some(bad) = m.nodes().find(|s| s.dim() != n) {
                return Err(LinalgError::DimensionMismatch(format!(
                    "mode {}: sample is {}x{}, expected {n}x{n}",
                    i + 1,
                    bad.dim(),
                    bad.dim()
                )));
            }
            if m.nodes().any(|s| !s.is_finite()) {
                return Err(LinalgError::InvalidMatrix(format!(
                    "mode {}: non-finite sample",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    pub fn dim(&self) -> usize {
        self.modes[0].samples[0].dim()
    }

    pub fn node_count(&self) -> usize {
        2 * self.grid_points
    }

    pub fn node_spacing(&self) -> f64 {
        self.theta / self.node_count() as f64
    }

    pub fn node_time(&self, j: usize) -> f64 {
        self.theta * j as f64 / self.node_count() as f64
    }

    pub fn node_tuple(&self, j: usize) -> ModeSymTuple {
        let j = j % self.node_count();
        ModeSymTuple(self.modes.iter().map(|m| m.node(j).clone()).collect())
    }

    /// Value at an arbitrary time. Exact at nodes; elsewhere the cubic through
    /// the four surrounding nodes (periodic wrap).
    pub fn interpolate(&self, mode: usize, t: f64) -> SymMatrix {
        let k = self.node_count();
        let s = (t / self.theta).rem_euclid(1.0) * k as f64;
        let j0 = s.floor();
        let frac = s - j0;
        let j0 = j0 as usize % k;
        let samples = &self.modes[mode];
        if frac == 0.0 {
            return samples.node(j0).clone();
        }
        // Lagrange weights on nodes -1, 0, 1, 2 relative to j0.
        let x = frac;
        let w = [
            -x * (x - 1.0) * (x - 2.0) / 6.0,
            (x + 1.0) * (x - 1.0) * (x - 2.0) / 2.0,
            -(x + 1.0) * x * (x - 2.0) / 2.0,
            (x + 1.0) * x * (x - 1.0) / 6.0,
        ];
        let mut acc = samples.node(j0).as_matrix() * 0.0;
        for (off, wk) in w.iter().enumerate() {
            let j = (j0 + k + off - 1) % k;
            acc += samples.node(j).as_matrix() * *wk;
        }
        SymMatrix::symmetrized(acc)
    }

    pub fn interpolate_tuple(&self, t: f64) -> ModeSymTuple {
        ModeSymTuple((0..self.mode_count()).map(|i| self.interpolate(i, t)).collect())
    }

    /// Max over all nodes and modes of the Frobenius distance.
    pub fn max_distance(&self, other: &GridSolution) -> f64 {
        self.modes
            .iter()
            .zip(&other.modes)
            .flat_map(|(a, b)| {
                a.nodes()
                    .zip(b.nodes())
                    .map(|(x, y)| (x.as_matrix() - y.as_matrix()).norm())
            })
            .fold(0.0, f64::max)
    }

    pub fn max_norm(&self) -> f64 {
        self.modes
            .iter()
            .flat_map(|m| m.nodes().map(SymMatrix::frobenius_norm))
            .fold(0.0, f64::max)
    }

    /// `min λ_min(self − other)` over all nodes and modes.
    pub fn min_difference_eigenvalue(&self, other: &GridSolution) -> Result<f64, LinalgError> {
        let mut worst = f64::INFINITY;
        for (a, b) in self.modes.iter().zip(&other.modes) {
            for (x, y) in a.nodes().zip(b.nodes()) {
                worst = worst.min((x - y).min_eigenvalue()?);
            }
        }
        Ok(worst)
    }

    /// True when every node lies within `tol` (Frobenius) of node 0.
    pub fn is_constant(&self, tol: f64) -> bool {
        self.modes.iter().all(|m| {
            let first = m.node(0).as_matrix();
            m.nodes().all(|x| (x.as_matrix() - first).norm() <= tol)
        })
    }
}
