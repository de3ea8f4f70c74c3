#![allow(dead_code)]

use gtrde::problem::{parse_problem, ProblemData};
use serde_json::{json, Value};

/// One scalar mode with `r` noise channels.
pub struct ScalarMode {
    pub a: Vec<f64>,
    pub b: Vec<[f64; 2]>,
    pub m: f64,
    pub r11: f64,
    pub r22: f64,
    /// Sinusoidal amplitudes of `A_0` and `M`.
    pub amp_a0: f64,
    pub amp_m: f64,
}

impl ScalarMode {
    pub fn game(a0: f64, m: f64) -> Self {
        ScalarMode {
            a: vec![a0],
            b: vec![[1.0, 1.0]],
            m,
            r11: -7.0,
            r22: 4.0,
            amp_a0: 0.0,
            amp_m: 0.0,
        }
    }
}

pub fn scalar_json(q: &[Vec<f64>], theta: f64, modes: &[ScalarMode]) -> Value {
    let r = modes[0].a.len() - 1;
    let modes: Vec<Value> = modes
        .iter()
        .map(|md| {
            let mut v = json!({
                "A": md.a.iter().map(|x| vec![vec![*x]]).collect::<Vec<_>>(),
                "B": md.b.iter().map(|x| vec![x.to_vec()]).collect::<Vec<_>>(),
                "M": [[md.m]],
                "L": [[0.0, 0.0]],
                "R": [[md.r11, 0.0], [0.0, md.r22]],
            });
            if md.amp_a0 != 0.0 || md.amp_m != 0.0 {
                let mut a = vec![vec![vec![0.0]]; md.a.len()];
                a[0][0][0] = md.amp_a0;
                v["amplitudes"] = json!({
                    "A": a,
                    "B": vec![vec![vec![0.0, 0.0]]; md.b.len()],
                    "M": [[md.amp_m]],
                    "L": [[0.0, 0.0]],
                    "R": [[0.0, 0.0], [0.0, 0.0]],
                });
            }
            v
        })
        .collect();
    json!({
        "n": 1, "r": r, "m1": 1, "m2": 1, "N": modes.len(), "theta": theta,
        "Q": q, "modes": modes,
    })
}

pub fn scalar_problem(q: &[Vec<f64>], theta: f64, modes: &[ScalarMode]) -> ProblemData {
    parse_problem(&scalar_json(q, theta, modes).to_string()).expect("valid test problem")
}

/// Positive root of `(3/28)X² + 2X − m = 0`.
pub fn quadratic_root(m: f64) -> f64 {
    let (a, b, c) = (3.0 / 28.0, 2.0, -m);
    (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a)
}

/// Newton on the symmetric two-mode algebraic system
/// `−2x_i + Σ_j q_ij x_j + 1 − (3/28)x_i² = 0`.
pub fn newton_two_mode(q: [[f64; 2]; 2]) -> [f64; 2] {
    let c = 3.0 / 28.0;
    let mut x = [0.0f64; 2];
    for _ in 0..60 {
        let g: Vec<f64> = (0..2)
            .map(|i| -2.0 * x[i] + q[i][0] * x[0] + q[i][1] * x[1] + 1.0 - c * x[i] * x[i])
            .collect();
        let j00 = -2.0 + q[0][0] - 2.0 * c * x[0];
        let j11 = -2.0 + q[1][1] - 2.0 * c * x[1];
        let det = j00 * j11 - q[0][1] * q[1][0];
        x[0] -= (j11 * g[0] - q[0][1] * g[1]) / det;
        x[1] -= (-q[1][0] * g[0] + j00 * g[1]) / det;
    }
    x
}
