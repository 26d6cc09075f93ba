//! Exact solution of the metric trust-region subproblem, used as a reference
//! for the dogleg step.
//!
//! With `F = LLᵀ` the change of variables `Δθ̂ = LᵀΔθ` turns
//! `min ∇fᵀΔθ + ½ΔθᵀBΔθ s.t. ΔθᵀFΔθ ≤ δ` into the Euclidean problem on
//! `ĝ = L⁻¹∇f`, `B̂ = L⁻¹BL⁻ᵀ` with radius `√δ`. The Euclidean problem is
//! solved through the eigendecomposition of `B̂` and a safeguarded search on
//! the Lagrange multiplier `λ`, then mapped back with `Δθ = L⁻ᵀΔθ̂`.
//!
//! Dense and cubic in `d`; meant for `d ≤ 32`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::ParamVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("{0} matrix is not symmetric positive definite")]
    NotSpd(&'static str),
    #[error("dimension mismatch")]
    DimensionMismatch,
    #[error("invalid trust radius {0}")]
    InvalidRadius(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub step: ParamVector,
    /// Multiplier `λ ≥ 0` of the constraint; zero for an interior optimum.
    pub multiplier: f64,
}

/// Global minimizer of the quadratic model inside `ΔθᵀFΔθ ≤ δ`.
pub fn exact_tr_oracle(
    grad: &ParamVector,
    b_dense: &DMatrix<f64>,
    f_dense: &DMatrix<f64>,
    delta: f64,
) -> Result<OracleSolution, OracleError> {
    let d = grad.len();
    if b_dense.shape() != (d, d) || f_dense.shape() != (d, d) {
        return Err(OracleError::DimensionMismatch);
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(OracleError::InvalidRadius(delta));
    }
    if b_dense.clone().cholesky().is_none() {
        return Err(OracleError::NotSpd("curvature"));
    }
    let chol = f_dense.clone().cholesky().ok_or(OracleError::NotSpd("metric"))?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or(OracleError::NotSpd("metric"))?;

    let g_hat = &l_inv * grad.as_dvector();
    let b_hat = &l_inv * b_dense * l_inv.transpose();
    let b_hat = (&b_hat + b_hat.transpose()) * 0.5;
    let eig = b_hat.symmetric_eigen();
    let coeffs = eig.eigenvectors.transpose() * &g_hat;
    let lambdas = &eig.eigenvalues;

    let multiplier = if secular_norm_sq(coeffs.as_slice(), lambdas.as_slice(), 0.0).0 <= delta {
        0.0
    } else {
        solve_multiplier(coeffs.as_slice(), lambdas.as_slice(), g_hat.norm(), delta)
    };

    let scaled = DVector::from_iterator(
        d,
        coeffs
            .iter()
            .zip(lambdas.iter())
            .map(|(c, l)| -c / (l + multiplier)),
    );
    let step_hat = &eig.eigenvectors * scaled;
    let step = l_inv.transpose() * step_hat;
    Ok(OracleSolution {
        step: ParamVector::from_dvector(step),
        multiplier,
    })
}

/// `‖p(μ)‖²` and its derivative in `μ`, where `p(μ) = −(B̂ + μI)⁻¹ĝ` in the
/// eigenbasis of `B̂`.
fn secular_norm_sq(coeffs: &[f64], eigenvalues: &[f64], mu: f64) -> (f64, f64) {
    coeffs
        .iter()
        .zip(eigenvalues)
        .fold((0.0, 0.0), |(v, dv), (c, l)| {
            let inv = 1.0 / (l + mu);
            (v + (c * inv).powi(2), dv - 2.0 * c * c * inv.powi(3))
        })
}

// ‖p(μ)‖² is strictly decreasing on μ ≥ 0: bisection on a bracket, then
// Newton on 1/‖p(μ)‖ − 1/√δ kept inside the bracket.
fn solve_multiplier(coeffs: &[f64], eigenvalues: &[f64], g_norm: f64, delta: f64) -> f64 {
    let norm_sq = |mu: f64| secular_norm_sq(coeffs, eigenvalues, mu);
    let radius = delta.sqrt();
    let mut lo = 0.0;
    let mut hi = (g_norm / radius).max(f64::MIN_POSITIVE);
    while norm_sq(hi).0 > delta {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if norm_sq(mid).0 > delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut mu = 0.5 * (lo + hi);
    for _ in 0..5 {
        let (n2, dn2) = norm_sq(mu);
        let n = n2.sqrt();
        let phi = 1.0 / n - 1.0 / radius;
        let dphi = -dn2 / (2.0 * n * n2);
        if !(dphi.is_finite() && dphi != 0.0) {
            break;
        }
        let next = mu - phi / dphi;
        if !(next >= lo && next <= hi) {
            break;
        }
        mu = next;
    }
    mu
}
