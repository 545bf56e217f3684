//! Worst-case rate certification: the two small LMIs for the consensus and
//! disagreement blocks, a feasibility search, bisection on ρ and a scalar
//! search over the step size.

use nalgebra::{Cholesky, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{AlgorithmParams, EngineError};
use crate::linalg::sym_extreme_eigenvalues;

/// Lower eigenvalue floor for `P` and `Q` in an accepted certificate.
pub const CERT_EPS: f64 = 1e-8;
/// Largest eigenvalue an accepted `S1`/`S2` may have.
pub const LMI_TOL: f64 = 1e-9;
pub const DEFAULT_RHO_TOL: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertifyError {
    #[error("rho must lie in (0, 1), got {0}")]
    BadRho(f64),
    #[error("invalid sector data: m = {m}, L = {l}")]
    BadSector { m: f64, l: f64 },
    #[error("sigma must lie in [0, 1), got {0}")]
    BadSigma(f64),
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("invalid alpha range [{0}, {1}]")]
    BadRange(f64, f64),
    #[error("no certificate for any rho < 1; the parameters are likely unstable")]
    InfeasibleAtOne,
    #[error("no step size in the range admits a certificate below rho = 1")]
    NoConvergentAlpha,
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Sector multipliers for the gradient (`m0`) and the Laplacian (`m1`).
#[derive(Debug, Clone, PartialEq)]
pub struct IqcData {
    pub m: f64,
    pub l: f64,
    pub sigma: f64,
    pub m0: DMatrix<f64>,
    pub m1: DMatrix<f64>,
}

impl IqcData {
    pub fn new(m: f64, l: f64, sigma: f64) -> Result<Self, CertifyError> {
        if !(m > 0.0 && l >= m && l.is_finite()) {
            return Err(CertifyError::BadSector { m, l });
        }
        if !(0.0..1.0).contains(&sigma) {
            return Err(CertifyError::BadSigma(sigma));
        }
        let m0 = DMatrix::from_row_slice(2, 2, &[-2.0 * m * l, l + m, l + m, -2.0]);
        let m1 = DMatrix::from_row_slice(2, 2, &[sigma * sigma - 1.0, 1.0, 1.0, -1.0]);
        Ok(Self { m, l, sigma, m0, m1 })
    }

    pub fn kappa(&self) -> f64 {
        self.l / self.m
    }
}

/// Per-agent realization split into the consensus (`p`) and disagreement (`q`)
/// blocks. Output rows come from the compact Algorithm 1 form:
/// `x = w₁ - v` and `y = δw₁ + ηw₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitRealization {
    pub a_p: DMatrix<f64>,
    pub a_q: DMatrix<f64>,
    pub b_pu: DMatrix<f64>,
    pub b_pv: DMatrix<f64>,
    pub b_qu: DMatrix<f64>,
    pub b_qv: DMatrix<f64>,
    pub c_x: DMatrix<f64>,
    pub d_xu: f64,
    pub d_xv: f64,
    pub c_y: DMatrix<f64>,
    pub d_yu: f64,
    pub d_yv: f64,
}

impl SplitRealization {
    pub fn from_params(p: &AlgorithmParams) -> Self {
        let col = |a: f64, b: f64| DMatrix::from_column_slice(2, 1, &[a, b]);
        Self {
            a_p: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            a_q: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]),
            b_pu: col(-p.alpha, 0.0),
            b_pv: col(-p.zeta, 0.0),
            b_qu: col(-p.alpha, 0.0),
            b_qv: col(-p.zeta, -1.0),
            c_x: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            d_xu: 0.0,
            d_xv: -1.0,
            c_y: DMatrix::from_row_slice(1, 2, &[p.delta, p.eta]),
            d_yu: 0.0,
            d_yv: 0.0,
        }
    }

    /// `R` for the consensus block: rows `[A_p B_pu; I 0; C_x D_xu; 0 1]`.
    fn r1(&self) -> DMatrix<f64> {
        let mut r = DMatrix::zeros(6, 3);
        r.view_mut((0, 0), (2, 2)).copy_from(&self.a_p);
        r.view_mut((0, 2), (2, 1)).copy_from(&self.b_pu);
        r[(2, 0)] = 1.0;
        r[(3, 1)] = 1.0;
        r.view_mut((4, 0), (1, 2)).copy_from(&self.c_x);
        r[(4, 2)] = self.d_xu;
        r[(5, 2)] = 1.0;
        r
    }

    /// `R` for the disagreement block, columns `(ξ, u, v)`.
    fn r2(&self) -> DMatrix<f64> {
        let mut r = DMatrix::zeros(8, 4);
        r.view_mut((0, 0), (2, 2)).copy_from(&self.a_q);
        r.view_mut((0, 2), (2, 1)).copy_from(&self.b_qu);
        r.view_mut((0, 3), (2, 1)).copy_from(&self.b_qv);
        r[(2, 0)] = 1.0;
        r[(3, 1)] = 1.0;
        r.view_mut((4, 0), (1, 2)).copy_from(&self.c_x);
        r[(4, 2)] = self.d_xu;
        r[(4, 3)] = self.d_xv;
        r[(5, 2)] = 1.0;
        r.view_mut((6, 0), (1, 2)).copy_from(&self.c_y);
        r[(6, 2)] = self.d_yu;
        r[(6, 3)] = self.d_yv;
        r[(7, 3)] = 1.0;
        r
    }
}

/// Decision variables of the LMIs.
#[derive(Debug, Clone, PartialEq)]
pub struct CertVars {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub lambda0: f64,
    pub lambda1: f64,
}

impl CertVars {
    pub fn identity() -> Self {
        Self { p: DMatrix::identity(2, 2), q: DMatrix::identity(2, 2), lambda0: 0.0, lambda1: 0.0 }
    }

    fn scaled(&self, s: f64) -> Self {
        Self { p: &self.p * s, q: &self.q * s, lambda0: self.lambda0 * s, lambda1: self.lambda1 * s }
    }
}

fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut at = 0;
    for b in blocks {
        out.view_mut((at, at), b.shape()).copy_from(b);
        at += b.nrows();
    }
    out
}

fn sandwich(r: &DMatrix<f64>, mid: &DMatrix<f64>) -> DMatrix<f64> {
    let s = r.transpose() * mid * r;
    // Exact symmetry: copy the upper triangle down.
    let mut out = s.clone();
    for i in 0..s.nrows() {
        for j in 0..i {
            out[(i, j)] = s[(j, i)];
        }
    }
    out
}

/// `(S1, S2)`; the certificate conditions are `S1 ⪯ 0` and `S2 ⪯ 0`.
pub fn assemble_lmis(
    rho: f64,
    real: &SplitRealization,
    iqc: &IqcData,
    vars: &CertVars,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let r2 = rho * rho;
    let mid1 = block_diag(&[vars.p.clone(), &vars.p * -r2, &iqc.m0 * vars.lambda0]);
    let mid2 = block_diag(&[vars.q.clone(), &vars.q * -r2, &iqc.m0 * vars.lambda0, &iqc.m1 * vars.lambda1]);
    (sandwich(&real.r1(), &mid1), sandwich(&real.r2(), &mid2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub rho: f64,
    pub p: [[f64; 2]; 2],
    pub q: [[f64; 2]; 2],
    pub lambda0: f64,
    pub lambda1: f64,
    pub lmi1_max_eig: f64,
    pub lmi2_max_eig: f64,
    pub cond_t: f64,
}

fn to_array(m: &DMatrix<f64>) -> [[f64; 2]; 2] {
    [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]]
}

fn from_array(a: &[[f64; 2]; 2]) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[a[0][0], a[0][1], a[1][0], a[1][1]])
}

impl Certificate {
    pub fn p_matrix(&self) -> DMatrix<f64> {
        from_array(&self.p)
    }

    pub fn q_matrix(&self) -> DMatrix<f64> {
        from_array(&self.q)
    }

    pub fn vars(&self) -> CertVars {
        CertVars { p: self.p_matrix(), q: self.q_matrix(), lambda0: self.lambda0, lambda1: self.lambda1 }
    }

    /// Re-runs the eigenvalue checks against the given problem data.
    pub fn recheck(&self, real: &SplitRealization, iqc: &IqcData) -> bool {
        verify_certificate(self.rho, real, iqc, &self.vars()).is_some()
    }
}

/// Accepts `vars` only if `P, Q ⪰ εI`, `λ ≥ 0` and both LMIs have largest
/// eigenvalue at most [`LMI_TOL`]. Independent of how `vars` was found.
pub fn verify_certificate(rho: f64, real: &SplitRealization, iqc: &IqcData, vars: &CertVars) -> Option<Certificate> {
    let sym = |m: &DMatrix<f64>| (m - m.transpose()).amax() == 0.0;
    if !sym(&vars.p) || !sym(&vars.q) || !vars.lambda0.is_finite() || !vars.lambda1.is_finite() {
        return None;
    }
    if vars.lambda0 < 0.0 || vars.lambda1 < 0.0 {
        return None;
    }
    let (p_min, p_max) = sym_extreme_eigenvalues(&vars.p);
    let (q_min, q_max) = sym_extreme_eigenvalues(&vars.q);
    if p_min < CERT_EPS || q_min < CERT_EPS {
        return None;
    }
    let (s1, s2) = assemble_lmis(rho, real, iqc, vars);
    let e1 = sym_extreme_eigenvalues(&s1).1;
    let e2 = sym_extreme_eigenvalues(&s2).1;
    if !(e1 <= LMI_TOL && e2 <= LMI_TOL) {
        return None;
    }
    Some(Certificate {
        rho,
        p: to_array(&vars.p),
        q: to_array(&vars.q),
        lambda0: vars.lambda0,
        lambda1: vars.lambda1,
        lmi1_max_eig: e1,
        lmi2_max_eig: e2,
        cond_t: p_max.max(q_max) / p_min.min(q_min),
    })
}

/// Strategy for finding LMI variables at a fixed ρ. A returned point is
/// always re-verified, so a search only affects completeness.
pub trait FeasibilitySearch: Sync {
    fn search(&self, rho: f64, real: &SplitRealization, iqc: &IqcData) -> Option<CertVars>;
}

/// Log-barrier interior-point method on
/// `max μ  s.t.  -S1 ⪰ μI, -S2 ⪰ μI, P ⪰ μI, Q ⪰ μI, λ ≥ 0, tr P + tr Q + λ₀ + λ₁ ≤ 1`.
/// The bounded trace makes the optimum finite; a strictly positive μ is a
/// certificate and rescaling by `1/μ` gives unit margins.
#[derive(Debug, Clone)]
pub struct BarrierSearch {
    /// Accept once μ exceeds this.
    pub feasible_margin: f64,
    pub t_growth: f64,
    pub max_t: f64,
    pub max_newton: usize,
}

impl Default for BarrierSearch {
    fn default() -> Self {
        Self { feasible_margin: 1e-10, t_growth: 20.0, max_t: 1e14, max_newton: 200 }
    }
}

const NVARS: usize = 9;
const MU: usize = 8;

fn vars_from(z: &[f64]) -> CertVars {
    CertVars {
        p: DMatrix::from_row_slice(2, 2, &[z[0], z[1], z[1], z[2]]),
        q: DMatrix::from_row_slice(2, 2, &[z[3], z[4], z[4], z[5]]),
        lambda0: z[6],
        lambda1: z[7],
    }
}

/// Affine matrix function `F(z) = A₀ + Σ zᵢ Aᵢ`.
struct AffineBlock {
    a0: DMatrix<f64>,
    a: Vec<DMatrix<f64>>,
}

impl AffineBlock {
    fn at(&self, z: &[f64]) -> DMatrix<f64> {
        let mut f = self.a0.clone();
        for (zi, ai) in z.iter().zip(&self.a) {
            f += ai * *zi;
        }
        f
    }
}

fn barrier_blocks(rho: f64, real: &SplitRealization, iqc: &IqcData) -> Vec<AffineBlock> {
    let eval = |z: &[f64]| -> Vec<DMatrix<f64>> {
        let v = vars_from(z);
        let mu = z[MU];
        let (s1, s2) = assemble_lmis(rho, real, iqc, &v);
        vec![
            -s1 - DMatrix::identity(3, 3) * mu,
            -s2 - DMatrix::identity(4, 4) * mu,
            &v.p - DMatrix::identity(2, 2) * mu,
            &v.q - DMatrix::identity(2, 2) * mu,
            DMatrix::from_element(1, 1, v.lambda0),
            DMatrix::from_element(1, 1, v.lambda1),
            DMatrix::from_element(1, 1, 1.0 - v.p.trace() - v.q.trace() - v.lambda0 - v.lambda1),
        ]
    };
    let zero = [0.0; NVARS];
    let base = eval(&zero);
    let mut units: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(NVARS);
    for i in 0..NVARS {
        let mut e = zero;
        e[i] = 1.0;
        units.push(eval(&e));
    }
    base.into_iter()
        .enumerate()
        .map(|(b, a0)| {
            let a = units.iter().map(|u| &u[b] - &a0).collect();
            AffineBlock { a0, a }
        })
        .collect()
}

struct BarrierPoint {
    phi: f64,
    grad: Vec<f64>,
    hess: DMatrix<f64>,
}

fn barrier_value(blocks: &[AffineBlock], z: &[f64], t: f64) -> Option<f64> {
    let mut phi = -t * z[MU];
    for b in blocks {
        let chol = Cholesky::new(b.at(z))?;
        phi -= 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    }
    Some(phi)
}

fn barrier_point(blocks: &[AffineBlock], z: &[f64], t: f64) -> Option<BarrierPoint> {
    let mut phi = -t * z[MU];
    let mut grad = vec![0.0; NVARS];
    grad[MU] = -t;
    let mut hess = DMatrix::zeros(NVARS, NVARS);
    for b in blocks {
        let chol = Cholesky::new(b.at(z))?;
        phi -= 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let inv = chol.inverse();
        let w: Vec<DMatrix<f64>> = b.a.iter().map(|a| &inv * a).collect();
        for i in 0..NVARS {
            grad[i] -= w[i].trace();
            for j in 0..=i {
                // tr(W_i W_j) without forming the product.
                let h = w[i].component_mul(&w[j].transpose()).sum();
                hess[(i, j)] += h;
                if i != j {
                    hess[(j, i)] += h;
                }
            }
        }
    }
    Some(BarrierPoint { phi, grad, hess })
}

enum Centering {
    Centered(Vec<f64>),
    Feasible(Vec<f64>),
    Stuck(Vec<f64>),
}

impl BarrierSearch {
    fn center(&self, blocks: &[AffineBlock], mut z: Vec<f64>, t: f64) -> Centering {
        for _ in 0..self.max_newton {
            let Some(pt) = barrier_point(blocks, &z, t) else { return Centering::Stuck(z) };
            let g = nalgebra::DVector::from_column_slice(&pt.grad);
            let mut h = pt.hess.clone();
            let step = loop {
                if let Some(c) = Cholesky::new(h.clone()) {
                    break c.solve(&(-&g));
                }
                let bump = 1e-12 * h.diagonal().amax().max(1.0);
                for i in 0..NVARS {
                    h[(i, i)] += bump;
                }
            };
            let decrement = -g.dot(&step);
            if decrement / 2.0 <= 1e-10 {
                return Centering::Centered(z);
            }
            let mut s = 1.0;
            let mut moved = false;
            while s > 1e-12 {
                let cand: Vec<f64> = z.iter().zip(step.iter()).map(|(a, d)| a + s * d).collect();
                if let Some(phi) = barrier_value(blocks, &cand, t) {
                    if phi <= pt.phi - 0.25 * s * decrement {
                        z = cand;
                        moved = true;
                        break;
                    }
                }
                s *= 0.5;
            }
            if !moved {
                return Centering::Stuck(z);
            }
            if z[MU] > self.feasible_margin {
                return Centering::Feasible(z);
            }
        }
        Centering::Stuck(z)
    }
}

impl FeasibilitySearch for BarrierSearch {
    fn search(&self, rho: f64, real: &SplitRealization, iqc: &IqcData) -> Option<CertVars> {
        let blocks = barrier_blocks(rho, real, iqc);
        let total_dim: usize = blocks.iter().map(|b| b.a0.nrows()).sum();
        let mut z = vec![0.2, 0.0, 0.2, 0.2, 0.0, 0.2, 0.05, 0.05, 0.0];
        // Start strictly inside: μ below every block that contains it.
        let mut floor = f64::INFINITY;
        for b in &blocks[..4] {
            floor = floor.min(sym_extreme_eigenvalues(&b.at(&z)).0);
        }
        z[MU] = floor - 1.0;
        let mut t = 1.0;
        let accept = |z: &[f64]| {
            let mu = z[MU];
            Some(vars_from(z).scaled(1.0 / mu))
        };
        while t <= self.max_t {
            match self.center(&blocks, z, t) {
                Centering::Feasible(zf) => return accept(&zf),
                Centering::Centered(zc) => {
                    if zc[MU] > self.feasible_margin {
                        return accept(&zc);
                    }
                    // Duality gap of a centered point is at most total_dim / t.
                    if zc[MU] + total_dim as f64 / t < self.feasible_margin {
                        return None;
                    }
                    z = zc;
                }
                Centering::Stuck(zs) => {
                    if zs[MU] > self.feasible_margin {
                        return accept(&zs);
                    }
                    z = zs;
                }
            }
            t *= self.t_growth;
        }
        None
    }
}

/// Multi-start Nelder-Mead on `max(λmax S1, λmax S2, ε-violations)` with
/// `P`, `Q` parameterized through Cholesky factors and the variables
/// normalized to unit total trace.
#[derive(Debug, Clone)]
pub struct SimplexSearch {
    pub starts: usize,
    pub max_evals: usize,
    pub seed: u64,
}

impl Default for SimplexSearch {
    fn default() -> Self {
        Self { starts: 20, max_evals: 4000, seed: 0 }
    }
}

fn simplex_vars(theta: &[f64]) -> CertVars {
    let chol = |a: f64, b: f64, c: f64| {
        let l = DMatrix::from_row_slice(2, 2, &[a.exp(), 0.0, b, c.exp()]);
        &l * l.transpose()
    };
    let p = chol(theta[0], theta[1], theta[2]);
    let q = chol(theta[3], theta[4], theta[5]);
    let (l0, l1) = (theta[6].exp(), theta[7].exp());
    let total = p.trace() + q.trace() + l0 + l1;
    CertVars { p, q, lambda0: l0, lambda1: l1 }.scaled(1.0 / total)
}

fn simplex_objective(rho: f64, real: &SplitRealization, iqc: &IqcData, theta: &[f64]) -> f64 {
    let v = simplex_vars(theta);
    if !v.p.iter().chain(v.q.iter()).all(|x| x.is_finite()) {
        return f64::INFINITY;
    }
    let (s1, s2) = assemble_lmis(rho, real, iqc, &v);
    let e1 = sym_extreme_eigenvalues(&s1).1;
    let e2 = sym_extreme_eigenvalues(&s2).1;
    let pmin = sym_extreme_eigenvalues(&v.p).0;
    let qmin = sym_extreme_eigenvalues(&v.q).0;
    e1.max(e2).max(CERT_EPS - pmin).max(CERT_EPS - qmin)
}

/// Plain Nelder-Mead; stops early once `stop_below` is reached.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    start: &[f64],
    scale: f64,
    max_evals: usize,
    stop_below: f64,
) -> (Vec<f64>, f64) {
    let n = start.len();
    let mut pts: Vec<Vec<f64>> = vec![start.to_vec()];
    for i in 0..n {
        let mut p = start.to_vec();
        p[i] += scale;
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| f(p)).collect();
    let mut evals = n + 1;
    while evals < max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        if vals[0] < stop_below || (vals[n] - vals[0]).abs() < 1e-15 {
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|c| pts[..n].iter().map(|p| p[c]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|c| centroid[c] + t * (pts[n][c] - centroid[c])).collect() };
        let xr = along(-1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            evals += 1;
            if fe < fr {
                pts[n] = xe;
                vals[n] = fe;
            } else {
                pts[n] = xr;
                vals[n] = fr;
            }
        } else if fr < vals[n - 1] {
            pts[n] = xr;
            vals[n] = fr;
        } else {
            let (xc, fc) = if fr < vals[n] {
                let x = along(-0.5);
                let v = f(&x);
                (x, v)
            } else {
                let x = along(0.5);
                let v = f(&x);
                (x, v)
            };
            evals += 1;
            if fc < vals[n].min(fr) {
                pts[n] = xc;
                vals[n] = fc;
            } else {
                for i in 1..=n {
                    pts[i] = (0..n).map(|c| pts[0][c] + 0.5 * (pts[i][c] - pts[0][c])).collect();
                    vals[i] = f(&pts[i]);
                }
                evals += n;
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    (pts[best].clone(), vals[best])
}

impl FeasibilitySearch for SimplexSearch {
    fn search(&self, rho: f64, real: &SplitRealization, iqc: &IqcData) -> Option<CertVars> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        for s in 0..self.starts {
            let start: Vec<f64> = if s == 0 {
                vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
            } else {
                (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect()
            };
            let mut theta = start;
            // Restarting from the best point refreshes a collapsed simplex.
            for _ in 0..4 {
                let (best, val) =
                    nelder_mead(|th| simplex_objective(rho, real, iqc, th), &theta, 1.0, self.max_evals / 4, -1e-9);
                theta = best;
                if val < -1e-9 {
                    let v = simplex_vars(&theta);
                    let margin = -val;
                    return Some(v.scaled(1.0 / margin));
                }
            }
        }
        None
    }
}

fn validate(rho: f64) -> Result<(), CertifyError> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(CertifyError::BadRho(rho));
    }
    Ok(())
}

/// Searches with the default [`BarrierSearch`]. `Ok(None)` means the search
/// failed, which is not a proof of infeasibility.
pub fn find_certificate(
    rho: f64,
    params: &AlgorithmParams,
    m: f64,
    l: f64,
    sigma: f64,
) -> Result<Option<Certificate>, CertifyError> {
    find_certificate_with(rho, params, m, l, sigma, &BarrierSearch::default())
}

pub fn find_certificate_with(
    rho: f64,
    params: &AlgorithmParams,
    m: f64,
    l: f64,
    sigma: f64,
    search: &dyn FeasibilitySearch,
) -> Result<Option<Certificate>, CertifyError> {
    validate(rho)?;
    let iqc = IqcData::new(m, l, sigma)?;
    let real = SplitRealization::from_params(params);
    Ok(certify_at(rho, &real, &iqc, search))
}

fn certify_at(rho: f64, real: &SplitRealization, iqc: &IqcData, search: &dyn FeasibilitySearch) -> Option<Certificate> {
    let vars = search.search(rho, real, iqc)?;
    verify_certificate(rho, real, iqc, &vars)
}

/// `max((κ-1)/(κ+1), σ)`.
pub fn lower_bound(kappa: f64, sigma: f64) -> f64 {
    ((kappa - 1.0) / (kappa + 1.0)).max(sigma)
}

/// `√cond(T)`, with `cond(T)` taken over the eigenvalues of `P` and `Q`.
pub fn transient_factor(cert: &Certificate) -> f64 {
    let (p_min, p_max) = sym_extreme_eigenvalues(&cert.p_matrix());
    let (q_min, q_max) = sym_extreme_eigenvalues(&cert.q_matrix());
    (p_max.max(q_max) / p_min.min(q_min)).sqrt()
}

pub fn bisect_rho(
    params: &AlgorithmParams,
    m: f64,
    l: f64,
    sigma: f64,
    tol: f64,
) -> Result<(f64, Certificate), CertifyError> {
    bisect_rho_with(params, m, l, sigma, tol, &BarrierSearch::default())
}

/// Bisects on `[lower_bound, 1)`. The lower end is never certified, so the
/// returned ρ is at least the lower bound.
pub fn bisect_rho_with(
    params: &AlgorithmParams,
    m: f64,
    l: f64,
    sigma: f64,
    tol: f64,
    search: &dyn FeasibilitySearch,
) -> Result<(f64, Certificate), CertifyError> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(CertifyError::BadTolerance(tol));
    }
    let iqc = IqcData::new(m, l, sigma)?;
    let real = SplitRealization::from_params(params);
    let mut hi = 1.0 - tol.min(1e-6);
    let mut lo = lower_bound(iqc.kappa(), sigma);
    if lo >= hi {
        return Err(CertifyError::InfeasibleAtOne);
    }
    let mut cert = certify_at(hi, &real, &iqc, search).ok_or(CertifyError::InfeasibleAtOne)?;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= 0.0 {
            break;
        }
        match certify_at(mid, &real, &iqc, search) {
            Some(c) => {
                hi = mid;
                cert = c;
            }
            None => lo = mid,
        }
    }
    Ok((hi, cert))
}

/// Brent's method for a scalar minimum on `[a, b]`.
pub fn brent_minimize<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, xtol: f64, max_iter: usize) -> (f64, f64) {
    const GOLD: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = (a.min(b), a.max(b));
    let mut x = a + GOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..max_iter {
        let mid = 0.5 * (a + b);
        let tol1 = xtol + 1e-10 * x.abs();
        let tol2 = 2.0 * tol1;
        if (x - mid).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            if p.abs() < (0.5 * q * e).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if x < mid { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x < mid { b - x } else { a - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d > 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = f(u);
        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

#[derive(Debug, Clone)]
pub struct AlphaSearchOptions {
    /// Evenly spaced probes before refinement; guards against the narrow,
    /// possibly disconnected windows where certificates exist.
    pub grid_points: usize,
    /// Bisection tolerance while searching; finer than the reported tolerance
    /// so the objective is close to continuous in α.
    pub inner_tol: f64,
    /// Tolerance of the final reported ρ.
    pub tol: f64,
    pub alpha_xtol: f64,
    pub max_brent_iter: usize,
}

impl Default for AlphaSearchOptions {
    fn default() -> Self {
        Self { grid_points: 40, inner_tol: 1e-6, tol: DEFAULT_RHO_TOL, alpha_xtol: 1e-7, max_brent_iter: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaOptimum {
    pub alpha: f64,
    pub rho: f64,
    pub certificate: Certificate,
}

/// `[1e-3/L, 2/L·(1 + 1/κ)]`.
pub fn default_alpha_range(m: f64, l: f64) -> (f64, f64) {
    (1e-3 / l, 2.0 / l * (1.0 + m / l))
}

pub fn optimize_alpha(
    params: &AlgorithmParams,
    m: f64,
    l: f64,
    sigma: f64,
    range: (f64, f64),
) -> Result<AlphaOptimum, CertifyError> {
    optimize_alpha_with(params, m, l, sigma, range, &AlphaSearchOptions::default(), &BarrierSearch::default())
}

/// Grid scan followed by Brent refinement around the best probe. The
/// `alpha` field of `params` is ignored.
pub fn optimize_alpha_with(
    params: &AlgorithmParams,
    m: f64,
    l: f64,
    sigma: f64,
    range: (f64, f64),
    opts: &AlphaSearchOptions,
    search: &dyn FeasibilitySearch,
) -> Result<AlphaOptimum, CertifyError> {
    let (lo, hi) = range;
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(CertifyError::BadRange(lo, hi));
    }
    IqcData::new(m, l, sigma)?;
    let rate = |alpha: f64, tol: f64| -> Result<Option<(f64, Certificate)>, CertifyError> {
        let p = params.with_alpha(alpha)?;
        match bisect_rho_with(&p, m, l, sigma, tol, search) {
            Ok(r) => Ok(Some(r)),
            Err(CertifyError::InfeasibleAtOne) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let n = opts.grid_points.max(3);
    let grid: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let mut values = Vec::with_capacity(n);
    for &a in &grid {
        values.push(rate(a, opts.inner_tol)?.map_or(1.0, |r| r.0));
    }
    let best = (0..n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
    if values[best] >= 1.0 {
        return Err(CertifyError::NoConvergentAlpha);
    }
    let a = grid[best.saturating_sub(1)];
    let b = grid[(best + 1).min(n - 1)];
    let mut failure = None;
    let (alpha_b, rho_b) = brent_minimize(
        |alpha| match rate(alpha, opts.inner_tol) {
            Ok(r) => r.map_or(1.0, |r| r.0),
            Err(e) => {
                failure = Some(e);
                1.0
            }
        },
        a,
        b,
        opts.alpha_xtol,
        opts.max_brent_iter,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let alpha = if rho_b <= values[best] { alpha_b } else { grid[best] };
    let (rho, certificate) = rate(alpha, opts.tol)?.ok_or(CertifyError::NoConvergentAlpha)?;
    Ok(AlphaOptimum { alpha, rho, certificate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nids(alpha: f64) -> AlgorithmParams {
        AlgorithmParams::nids_like(alpha).unwrap()
    }

    #[test]
    fn m0_entries() {
        let iqc = IqcData::new(1.0, 1.0, 0.0).unwrap();
        assert_eq!(iqc.m0, DMatrix::from_row_slice(2, 2, &[-2.0, 2.0, 2.0, -2.0]));
        assert_eq!(iqc.m1, DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]));
    }

    #[test]
    fn unit_variables_at_rho_one_by_hand() {
        let p = nids(0.3);
        let (a, z) = (p.alpha, p.zeta);
        let iqc = IqcData::new(1.0, 10.0, 0.5).unwrap();
        let (s1, s2) = assemble_lmis(1.0, &SplitRealization::from_params(&p), &iqc, &CertVars::identity());
        let e1 = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, -a, 0.0, -1.0, 0.0, -a, 0.0, a * a]);
        let e2 = DMatrix::from_row_slice(
            4,
            4,
            &[1.0, 1.0, -a, -z - 1.0, 1.0, 0.0, 0.0, -1.0, -a, 0.0, a * a, a * z, -z - 1.0, -1.0, a * z, z * z + 1.0],
        );
        assert!((s1 - e1).amax() < 1e-15);
        assert!((s2 - e2).amax() < 1e-15);
    }

    #[test]
    fn lower_bound_examples() {
        assert!((lower_bound(10.0, 0.5) - 9.0 / 11.0).abs() < 1e-15);
        assert_eq!(lower_bound(1.0, 0.0), 0.0);
        assert_eq!(lower_bound(10.0, 0.9), 0.9);
    }

    #[test]
    fn transient_factor_examples() {
        let mut c = Certificate {
            rho: 0.5,
            p: [[1.0, 0.0], [0.0, 1.0]],
            q: [[1.0, 0.0], [0.0, 1.0]],
            lambda0: 0.0,
            lambda1: 0.0,
            lmi1_max_eig: 0.0,
            lmi2_max_eig: 0.0,
            cond_t: 1.0,
        };
        assert!((transient_factor(&c) - 1.0).abs() < 1e-15);
        c.p = [[4.0, 0.0], [0.0, 1.0]];
        assert!((transient_factor(&c) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn kappa_one_centralized_regime() {
        // αL = 1 puts the disagreement block's spectral radius at exactly 0.5.
        let p = nids(1.0);
        let c = find_certificate(0.502, &p, 1.0, 1.0, 0.0).unwrap().expect("feasible just above 0.5");
        assert!(c.lmi1_max_eig <= LMI_TOL && c.lmi2_max_eig <= LMI_TOL);
        assert!(find_certificate(0.49, &p, 1.0, 1.0, 0.0).unwrap().is_none());
    }

    #[test]
    fn below_lower_bound_is_infeasible() {
        let lb = lower_bound(10.0, 0.5);
        for alpha in [0.05, 0.1, 0.15, 0.18] {
            assert!(find_certificate(lb - 0.05, &nids(alpha), 1.0, 10.0, 0.5).unwrap().is_none());
        }
    }

    #[test]
    fn simplex_search_finds_an_easy_certificate() {
        let p = nids(0.18);
        let c = find_certificate_with(0.9, &p, 1.0, 10.0, 0.1, &SimplexSearch::default()).unwrap();
        let c = c.expect("simplex search should certify a loose rate");
        assert!(c.recheck(&SplitRealization::from_params(&p), &IqcData::new(1.0, 10.0, 0.1).unwrap()));
    }

    #[test]
    fn bisection_brackets_oracle_rate() {
        // Offline SDP oracle: κ = 10, σ = 0.3, α = 2/11 certifies 0.8184.
        let (rho, cert) = bisect_rho(&nids(2.0 / 11.0), 1.0, 10.0, 0.3, 1e-4).unwrap();
        assert!((rho - 0.8184).abs() < 1e-3, "{rho}");
        assert!(cert.recheck(&SplitRealization::from_params(&nids(2.0 / 11.0)), &IqcData::new(1.0, 10.0, 0.3).unwrap()));
        assert!(rho >= lower_bound(10.0, 0.3));
    }

    #[test]
    fn unstable_parameters_report_infeasible_at_one() {
        assert_eq!(bisect_rho(&nids(0.5), 1.0, 10.0, 0.3, 1e-4).unwrap_err(), CertifyError::InfeasibleAtOne);
        assert!(matches!(bisect_rho(&nids(0.1), 1.0, 10.0, 0.3, 0.0), Err(CertifyError::BadTolerance(_))));
    }

    #[test]
    fn brent_finds_parabola_minimum() {
        let (x, fx) = brent_minimize(|x| (x - 0.3).powi(2) + 1.0, -1.0, 2.0, 1e-10, 200);
        assert!((x - 0.3).abs() < 1e-7);
        assert!((fx - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_convergent_alpha_in_hopeless_range() {
        let err = optimize_alpha(&nids(0.1), 1.0, 10.0, 0.3, (0.5, 0.9)).unwrap_err();
        assert_eq!(err, CertifyError::NoConvergentAlpha);
    }

    fn sym2() -> impl Strategy<Value = DMatrix<f64>> {
        (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64).prop_map(|(a, b, c)| DMatrix::from_row_slice(2, 2, &[a, b, b, c]))
    }

    fn vars() -> impl Strategy<Value = CertVars> {
        (sym2(), sym2(), 0.0..5.0f64, 0.0..5.0f64).prop_map(|(p, q, lambda0, lambda1)| CertVars {
            p,
            q,
            lambda0,
            lambda1,
        })
    }

    proptest! {
        #[test]
        fn lmis_are_linear_and_symmetric(
            a in vars(), b in vars(), rho in 0.05..0.999f64,
            alpha in 0.01..0.3f64, sigma in 0.0..0.95f64, kappa in 1.0..50.0f64,
        ) {
            let real = SplitRealization::from_params(&nids(alpha));
            let iqc = IqcData::new(1.0, kappa, sigma).unwrap();
            let sum = CertVars { p: &a.p + &b.p, q: &a.q + &b.q, lambda0: a.lambda0 + b.lambda0, lambda1: a.lambda1 + b.lambda1 };
            let (sa1, sa2) = assemble_lmis(rho, &real, &iqc, &a);
            let (sb1, sb2) = assemble_lmis(rho, &real, &iqc, &b);
            let (ss1, ss2) = assemble_lmis(rho, &real, &iqc, &sum);
            prop_assert!((ss1.clone() - sa1 - sb1).amax() < 1e-12);
            prop_assert!((ss2.clone() - sa2 - sb2).amax() < 1e-12);
            prop_assert_eq!(ss1.transpose(), ss1);
            prop_assert_eq!(ss2.transpose(), ss2);
        }
    }
}
