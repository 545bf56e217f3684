use nalgebra::DMatrix;

use super::{project_disagreement, step_gm, AlgorithmParams, EngineError, NetworkState, Problem};
use crate::linalg::{balanced_laplacian_pinv, max_abs, pseudo_inverse};

/// Tolerance on `ζη L ŵ₂* + α(I - δL) u* = 0`, relative to `max(1, ‖u*‖_max)`.
pub const FIXED_POINT_TOL: f64 = 1e-9;

/// A stationary point of the projected system.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint {
    pub w1_star: DMatrix<f64>,
    pub w2hat_star: DMatrix<f64>,
    pub x_star: DMatrix<f64>,
    pub yhat_star: DMatrix<f64>,
    pub u_star: DMatrix<f64>,
    pub v_star: DMatrix<f64>,
}

impl FixedPoint {
    pub fn state(&self) -> NetworkState {
        NetworkState { w1: self.w1_star.clone(), w2: self.w2hat_star.clone(), k: 0 }
    }
}

/// `x* = 1 x_opt`, `u* = ∇F(x*)`, `v* = -(α/ζ) u*`, `w₁* = x* + v*`,
/// `ŵ₂* = α/(ζη) L⁺ (δL - I) u*`, `ŷ* = δ w₁* + η ŵ₂*`.
pub fn construct_fixed_point(params: &AlgorithmParams, problem: &Problem) -> Result<FixedPoint, EngineError> {
    let (alpha, delta, zeta, eta) = (params.alpha, params.delta, params.zeta, params.eta);
    if zeta * eta == 0.0 {
        return Err(EngineError::InvalidParams("zeta·eta must be nonzero".into()));
    }
    let lap = problem.laplacian.entries();
    let n = problem.n();
    let x_star = problem.consensus_optimum();
    let u_star = problem.model.stacked_gradient(&x_star)?;
    let v_star = &u_star * (-alpha / zeta);
    let w1_star = &x_star + &v_star;
    let delta_l_minus_i = lap * delta - DMatrix::identity(n, n);
    let lap_pinv = if problem.laplacian.balanced() && problem.laplacian.strongly_connected() {
        balanced_laplacian_pinv(lap)
    } else {
        pseudo_inverse(lap)
    };
    let w2hat_star = lap_pinv * (&delta_l_minus_i * &u_star) * (alpha / (zeta * eta));

    let lhs = lap * &w2hat_star * (zeta * eta);
    let rhs = (DMatrix::identity(n, n) - lap * delta) * &u_star * (-alpha);
    let residual = max_abs(&(lhs - rhs));
    if residual > FIXED_POINT_TOL * max_abs(&u_star).max(1.0) {
        return Err(EngineError::InconsistentFixedPoint { residual });
    }
    // L⁺ maps into the row space of L, which is orthogonal to 1 since L1 = 0;
    // the projection only removes rounding.
    let w2hat_star = project_disagreement(&w2hat_star);
    let yhat_star = &w1_star * delta + &w2hat_star * eta;
    Ok(FixedPoint { w1_star, w2hat_star, x_star, yhat_star, u_star, v_star })
}

/// Largest entrywise change of any of the six signals under one projected step.
pub fn fixed_point_residual(fp: &FixedPoint, params: &AlgorithmParams, problem: &Problem) -> Result<f64, EngineError> {
    let (next, rec) = step_gm(&fp.state(), params, problem)?;
    Ok([
        max_abs(&(next.w1 - &fp.w1_star)),
        max_abs(&(next.w2 - &fp.w2hat_star)),
        max_abs(&(rec.x - &fp.x_star)),
        max_abs(&(rec.y - &fp.yhat_star)),
        max_abs(&(rec.u - &fp.u_star)),
        max_abs(&(rec.v - &fp.v_star)),
    ]
    .into_iter()
    .fold(0.0, f64::max))
}
