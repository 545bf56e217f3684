use num_complex::Complex64;

use super::{AlgorithmParams, EngineError};

type Tf = [[Complex64; 2]; 2];

/// Distance below which `z` counts as sitting on a pole.
const POLE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorizationReport {
    /// Closed-form SVL transfer matrix vs. its state-space realization.
    pub template_vs_state_space: f64,
    /// Closed form vs. the product of the two factors.
    pub template_vs_factors: f64,
    /// Reversed product vs. the compact realization of the new family.
    pub swapped_vs_state_space: f64,
    /// Reversed product vs. its simplified closed form.
    pub swapped_vs_closed_form: f64,
}

impl FactorizationReport {
    pub fn max(&self) -> f64 {
        self.template_vs_state_space
            .max(self.template_vs_factors)
            .max(self.swapped_vs_state_space)
            .max(self.swapped_vs_closed_form)
    }
}

fn mul(a: &Tf, b: &Tf) -> Tf {
    let mut out = [[Complex64::new(0.0, 0.0); 2]; 2];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

fn max_diff(a: &Tf, b: &Tf) -> f64 {
    let mut m = 0.0_f64;
    for i in 0..2 {
        for j in 0..2 {
            m = m.max((a[i][j] - b[i][j]).norm());
        }
    }
    m
}

/// `C (zI - A)⁻¹ B + D` for 2-state, 2-input, 2-output real systems.
fn realize(a: [[f64; 2]; 2], b: [[f64; 2]; 2], c: [[f64; 2]; 2], d: [[f64; 2]; 2], z: Complex64) -> Tf {
    let one = Complex64::new(1.0, 0.0);
    let m = [[z - a[0][0], -a[0][1] * one], [-a[1][0] * one, z - a[1][1]]];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let lift = |x: [[f64; 2]; 2]| [[x[0][0] * one, x[0][1] * one], [x[1][0] * one, x[1][1] * one]];
    let mut out = mul(&mul(&lift(c), &inv), &lift(b));
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] += d[i][j];
        }
    }
    out
}

/// Evaluates the per-agent (`n = d = 1`) SVL transfer matrix, its two-factor
/// form, and the swapped product against the state-space realizations of both
/// families at `z`.
pub fn verify_factorization(params: &AlgorithmParams, z: Complex64) -> Result<FactorizationReport, EngineError> {
    let AlgorithmParams { alpha, beta, gamma, delta, zeta, eta } = *params;
    let one = Complex64::new(1.0, 0.0);
    let pole = |p: f64| (z - p).norm() < POLE_TOL;
    if pole(1.0) || (delta != 0.0 && pole((delta - eta) / delta)) {
        return Err(EngineError::Pole { re: z.re, im: z.im });
    }
    let lead = z * delta + (eta - delta);
    if lead.norm() < POLE_TOL {
        return Err(EngineError::Pole { re: z.re, im: z.im });
    }
    let zm1 = z - one;
    let zm1_sq = zm1 * zm1;

    let template: Tf = [
        [-alpha / zm1, -(z * z * delta + z * (gamma - 2.0 * delta) + (beta + delta - gamma)) / zm1_sq],
        [-alpha / zm1, -(z * gamma + (beta - gamma)) / zm1_sq],
    ];
    let left: Tf = [[-alpha / zm1, -(zm1 + zeta) / zm1], [-alpha / zm1, (-z * gamma - (beta - gamma)) / (zm1 * lead)]];
    let right: Tf = [[one, 0.0 * one], [0.0 * one, lead / zm1]];
    let swapped_closed: Tf =
        [[-alpha / zm1, -(zm1 + zeta) / zm1], [-alpha * lead / zm1_sq, -(z * gamma + beta - gamma) / zm1_sq]];

    let template_ss = realize(
        [[1.0, beta], [0.0, 1.0]],
        [[-alpha, -gamma], [0.0, -1.0]],
        [[1.0, 0.0], [1.0, 0.0]],
        [[0.0, -delta], [0.0, 0.0]],
        z,
    );
    let swapped_ss = realize(
        [[1.0, 0.0], [1.0, 1.0]],
        [[-alpha, -zeta], [0.0, -1.0]],
        [[1.0, 0.0], [delta, eta]],
        [[0.0, -1.0], [0.0, 0.0]],
        z,
    );
    let swapped = mul(&right, &left);
    Ok(FactorizationReport {
        template_vs_state_space: max_diff(&template, &template_ss),
        template_vs_factors: max_diff(&template, &mul(&left, &right)),
        swapped_vs_state_space: max_diff(&swapped, &swapped_ss),
        swapped_vs_closed_form: max_diff(&swapped, &swapped_closed),
    })
}
