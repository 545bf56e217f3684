//! Algorithm 1 (self-healing gradient descent), the SVL-template baseline, and
//! the projected realization used for analysis.
//!
//! States are row-stacked `n × d` matrices: row `i` belongs to agent `i`.

mod factorization;
mod fault;
mod fixed_point;

pub use factorization::{verify_factorization, FactorizationReport};
pub use fault::{inject, Fault, FaultOutcome};
pub use fixed_point::{construct_fixed_point, fixed_point_residual, FixedPoint};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{build_laplacian, GraphError, Laplacian, Topology};
use crate::objectives::{solve_centralized, ObjectiveError, ObjectiveModel, DEFAULT_SOLVER_TOL};

/// Any state entry above this magnitude aborts the run. `w₂` grows linearly by
/// design, so the ceiling is generous.
pub const DIVERGENCE_CEILING: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("gamma² = {gamma_sq} < 4·beta·delta = {four_beta_delta}: the zeros of G_s would be complex")]
    ComplexZeros { gamma_sq: f64, four_beta_delta: f64 },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("state diverged at step {k}")]
    Diverged { k: usize },
    #[error("state is {got:?} but the problem needs {expected:?}")]
    Shape { expected: (usize, usize), got: (usize, usize) },
    #[error("fixed-point equation residual {residual:e} exceeds tolerance; an assumption is broken")]
    InconsistentFixedPoint { residual: f64 },
    #[error("transfer function evaluated at a pole z = {re}{im:+}i")]
    Pole { re: f64, im: f64 },
    #[error("fault target: {0}")]
    BadFault(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// `(ζ, η)` from `(β, γ, δ)`: `ζ = β/γ` when `δ = 0`, otherwise the smaller root
/// of `δζ² - γζ + β = 0`; `η = γ - δζ`.
pub fn derive_params(beta: f64, gamma: f64, delta: f64) -> Result<(f64, f64), EngineError> {
    let disc = gamma * gamma - 4.0 * beta * delta;
    if disc < 0.0 {
        return Err(EngineError::ComplexZeros { gamma_sq: gamma * gamma, four_beta_delta: 4.0 * beta * delta });
    }
    let zeta = if delta == 0.0 {
        if gamma == 0.0 {
            return Err(EngineError::InvalidParams("gamma must be nonzero when delta = 0".into()));
        }
        beta / gamma
    } else {
        (gamma - disc.sqrt()) / (2.0 * delta)
    };
    Ok((zeta, gamma - delta * zeta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub zeta: f64,
    pub eta: f64,
}

impl AlgorithmParams {
    pub const DEFAULT_BETA: f64 = 0.5;
    pub const DEFAULT_GAMMA: f64 = 1.0;
    pub const DEFAULT_DELTA: f64 = 0.5;

    pub fn new(alpha: f64, beta: f64, gamma: f64, delta: f64) -> Result<Self, EngineError> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(EngineError::InvalidParams(format!("alpha must be positive, got {alpha}")));
        }
        let (zeta, eta) = derive_params(beta, gamma, delta)?;
        Ok(Self { alpha, beta, gamma, delta, zeta, eta })
    }

    /// `(β, γ, δ) = (0.5, 1, 0.5)`.
    pub fn nids_like(alpha: f64) -> Result<Self, EngineError> {
        Self::new(alpha, Self::DEFAULT_BETA, Self::DEFAULT_GAMMA, Self::DEFAULT_DELTA)
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self, EngineError> {
        Self::new(alpha, self.beta, self.gamma, self.delta)
    }

    pub fn svl(&self) -> SvlParams {
        SvlParams { alpha: self.alpha, beta: self.beta, gamma: self.gamma, delta: self.delta }
    }
}

/// Parameters of the original SVL-template realization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvlParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

/// Graph, objective, and reference optimum bundled for the steppers.
#[derive(Debug, Clone)]
pub struct Problem {
    pub topology: Topology,
    pub laplacian: Laplacian,
    pub model: ObjectiveModel,
    pub x_opt: DVector<f64>,
    pub solver_tol: f64,
}

impl Problem {
    pub fn new(topology: Topology, model: ObjectiveModel) -> Result<Self, EngineError> {
        Self::with_tolerance(topology, model, DEFAULT_SOLVER_TOL)
    }

    pub fn with_tolerance(topology: Topology, model: ObjectiveModel, solver_tol: f64) -> Result<Self, EngineError> {
        if topology.n() != model.n() {
            return Err(EngineError::Shape { expected: (topology.n(), model.dim()), got: (model.n(), model.dim()) });
        }
        let laplacian = build_laplacian(&topology)?;
        let x_opt = solve_centralized(&model, solver_tol)?;
        Ok(Self { topology, laplacian, model, x_opt, solver_tol })
    }

    pub fn n(&self) -> usize {
        self.model.n()
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// `1 · x_optᵀ`.
    pub fn consensus_optimum(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.dim(), |_, c| self.x_opt[c])
    }

    /// `max_i ‖x_i - x_opt‖`.
    pub fn max_error(&self, x: &DMatrix<f64>) -> f64 {
        x.row_iter().map(|r| (r.transpose() - &self.x_opt).norm()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub w1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub k: usize,
}

impl NetworkState {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self { w1: DMatrix::zeros(n, d), w2: DMatrix::zeros(n, d), k: 0 }
    }

    /// Entries drawn independently from `U[lo, hi)`, `w1` first then `w2`, row-major.
    pub fn uniform<R: Rng>(n: usize, d: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        let mut draw = || DMatrix::from_row_iterator(n, d, (0..n * d).map(|_| rng.gen_range(lo..hi)));
        let w1 = draw();
        let w2 = draw();
        Self { w1, w2, k: 0 }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.w1.shape()
    }

    /// The same state with `w₂` replaced by `(I - Π) w₂`.
    pub fn projected(&self) -> Self {
        Self { w1: self.w1.clone(), w2: project_disagreement(&self.w2), k: self.k }
    }

    pub fn check_finite(&self) -> Result<(), EngineError> {
        let ok = self.w1.iter().chain(self.w2.iter()).all(|v| v.is_finite() && v.abs() <= DIVERGENCE_CEILING);
        if ok {
            Ok(())
        } else {
            Err(EngineError::Diverged { k: self.k })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub max_error: f64,
}

/// `(I - Π) M`: subtract the column means.
pub fn project_disagreement(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows() as f64;
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    out
}

/// `v_i = Σ_j L_ij y_j`, summed in index order over structural nonzeros. The
/// packet-loss steppers use the same order so lossless runs match bit for bit.
pub(crate) fn apply_laplacian(lap: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = y.shape();
    let mut v = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..n {
            let w = lap[(i, j)];
            if w == 0.0 {
                continue;
            }
            for c in 0..d {
                v[(i, c)] += w * y[(j, c)];
            }
        }
    }
    v
}

fn check_shape(state: &NetworkState, problem: &Problem) -> Result<(), EngineError> {
    let expected = (problem.n(), problem.dim());
    if state.w1.shape() != expected || state.w2.shape() != expected {
        return Err(EngineError::Shape { expected, got: state.w1.shape() });
    }
    Ok(())
}

/// `y = δ w₁ + η w₂`.
pub(crate) fn alg1_message(state: &NetworkState, params: &AlgorithmParams) -> DMatrix<f64> {
    &state.w1 * params.delta + &state.w2 * params.eta
}

/// Shared tail of Algorithms 1 and 2 once `v` is known.
pub(crate) fn alg1_finish(
    state: &NetworkState,
    params: &AlgorithmParams,
    problem: &Problem,
    y: DMatrix<f64>,
    v: DMatrix<f64>,
) -> Result<(NetworkState, StepRecord), EngineError> {
    let x = &state.w1 - &v;
    let u = problem.model.stacked_gradient(&x)?;
    let w1 = &state.w1 - &u * params.alpha - &v * params.zeta;
    let w2 = &state.w1 + &state.w2 - &v;
    let next = NetworkState { w1, w2, k: state.k + 1 };
    next.check_finite()?;
    let max_error = problem.max_error(&x);
    Ok((next, StepRecord { k: state.k, x, y, u, v, max_error }))
}

/// One synchronous round of Algorithm 1.
pub fn step_alg1(
    state: &NetworkState,
    params: &AlgorithmParams,
    problem: &Problem,
) -> Result<(NetworkState, StepRecord), EngineError> {
    check_shape(state, problem)?;
    let y = alg1_message(state, params);
    let v = apply_laplacian(problem.laplacian.entries(), &y);
    alg1_finish(state, params, problem, y, v)
}

/// Shared tail of the SVL template once `v` is known.
pub(crate) fn svl_finish(
    state: &NetworkState,
    params: &SvlParams,
    problem: &Problem,
    y: DMatrix<f64>,
    v: DMatrix<f64>,
) -> Result<(NetworkState, StepRecord), EngineError> {
    let x = &state.w1 - &v * params.delta;
    let u = problem.model.stacked_gradient(&x)?;
    let w1 = &state.w1 + &state.w2 * params.beta - &u * params.alpha - &v * params.gamma;
    let w2 = &state.w2 - &v;
    let next = NetworkState { w1, w2, k: state.k + 1 };
    next.check_finite()?;
    let max_error = problem.max_error(&x);
    Ok((next, StepRecord { k: state.k, x, y, u, v, max_error }))
}

/// One round of the SVL-template realization: `y = w₁`, `x = w₁ - δv`,
/// `w₁⁺ = w₁ + βw₂ - αu - γv`, `w₂⁺ = w₂ - v`.
pub fn step_svl(
    state: &NetworkState,
    params: &SvlParams,
    problem: &Problem,
) -> Result<(NetworkState, StepRecord), EngineError> {
    check_shape(state, problem)?;
    let y = state.w1.clone();
    let v = apply_laplacian(problem.laplacian.entries(), &y);
    svl_finish(state, params, problem, y, v)
}

/// One round of the projected system: as Algorithm 1 but `w2` holds `ŵ₂` and
/// updates as `ŵ₂⁺ = (I - Π)(w₁ + ŵ₂ - v)`.
pub fn step_gm(
    state: &NetworkState,
    params: &AlgorithmParams,
    problem: &Problem,
) -> Result<(NetworkState, StepRecord), EngineError> {
    check_shape(state, problem)?;
    let y = alg1_message(state, params);
    let v = apply_laplacian(problem.laplacian.entries(), &y);
    let x = &state.w1 - &v;
    let u = problem.model.stacked_gradient(&x)?;
    let w1 = &state.w1 - &u * params.alpha - &v * params.zeta;
    let w2 = project_disagreement(&(&state.w1 + &state.w2 - &v));
    let next = NetworkState { w1, w2, k: state.k + 1 };
    next.check_finite()?;
    let max_error = problem.max_error(&x);
    Ok((next, StepRecord { k: state.k, x, y, u, v, max_error }))
}
