//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Matrices up to this size use a full SVD for the spectral norm.
pub const SVD_CUTOFF: usize = 64;

pub const POWER_TOL: f64 = 1e-12;
pub const POWER_MAX_ITER: usize = 10_000;

/// Largest singular value, choosing the routine by size.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows().max(a.ncols()) <= SVD_CUTOFF {
        spectral_norm_svd(a)
    } else {
        spectral_norm_power(a, POWER_TOL, POWER_MAX_ITER)
    }
}

pub fn spectral_norm_svd(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().max()
}

/// Power iteration on `AᵀA`. Stops when the relative change of the Rayleigh
/// quotient drops below `tol`.
pub fn spectral_norm_power(a: &DMatrix<f64>, tol: f64, max_iter: usize) -> f64 {
    let n = a.ncols();
    if n == 0 || a.nrows() == 0 {
        return 0.0;
    }
    // Irregular start so we are not orthogonal to structured singular vectors
    // (the all-ones vector is in the kernel of I - Π - L).
    let mut v = DVector::from_fn(n, |i, _| ((i as f64 + 1.0) * 0.754_877_666).sin() + 0.1);
    let norm = v.norm();
    if norm == 0.0 {
        return 0.0;
    }
    v /= norm;
    let ata = a.transpose() * a;
    let mut lambda = 0.0_f64;
    for _ in 0..max_iter {
        let w = &ata * &v;
        let next = v.dot(&w);
        let wn = w.norm();
        if wn == 0.0 {
            return 0.0;
        }
        v = w / wn;
        if (next - lambda).abs() <= tol * next.abs().max(f64::MIN_POSITIVE) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.max(0.0).sqrt()
}

/// `Π = (1/n)·11ᵀ`.
pub fn consensus_projector(n: usize) -> DMatrix<f64> {
    DMatrix::from_element(n, n, 1.0 / n as f64)
}

/// `I - Π`.
pub fn disagreement_projector(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n) - consensus_projector(n)
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(a.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}

pub fn sym_extreme_eigenvalues(a: &DMatrix<f64>) -> (f64, f64) {
    let ev = sym_eigenvalues(a);
    (ev[0], ev[ev.len() - 1])
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Moore-Penrose pseudo-inverse with a relative singular-value cutoff.
pub fn pseudo_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = a.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * 1e-12 * (r.max(c) as f64);
    svd.pseudo_inverse(eps.max(f64::MIN_POSITIVE)).unwrap_or_else(|_| DMatrix::zeros(c, r))
}

/// Pseudo-inverse of a Laplacian whose row and column sums both vanish and
/// whose kernel is exactly `span(1)`. Then `L⁺ = (L + J/n)⁻¹ - J/n`, which an LU
/// solve gets to working precision; the SVD route can lose several digits
/// on circulants with paired singular values. Falls back to the SVD route
/// when the shifted matrix is singular.
pub fn balanced_laplacian_pinv(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    if n == 0 || l.ncols() != n {
        return pseudo_inverse(l);
    }
    let j = DMatrix::from_element(n, n, 1.0 / n as f64);
    match (l + &j).lu().try_inverse() {
        Some(inv) => inv - j,
        None => pseudo_inverse(l),
    }
}
