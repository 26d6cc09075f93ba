//! BFGS Hessian approximation and the local quadratic model
//! `f_k + ∇f_kᵀΔθ + ½ΔθᵀB_kΔθ`.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::linalg::{quadratic_form, DenseSpd, LinalgError, ParamVector, SpdOperator};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadModelError {
    /// `sᵀy` below the curvature threshold; the caller keeps `B` unchanged.
    #[error("curvature sᵀy = {sty:e} below threshold {threshold:e}")]
    CurvatureTooSmall { sty: f64, threshold: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Step `s` and gradient difference `y` with their inner product cached.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvaturePair {
    s: ParamVector,
    y: ParamVector,
    sty: f64,
}

impl CurvaturePair {
    pub fn new(s: ParamVector, y: ParamVector) -> Result<Self, LinalgError> {
        y.check_dim(s.len())?;
        let sty = s.dot(&y);
        Ok(Self { s, y, sty })
    }

    pub fn s(&self) -> &ParamVector {
        &self.s
    }

    pub fn y(&self) -> &ParamVector {
        &self.y
    }

    pub fn sty(&self) -> f64 {
        self.sty
    }
}

/// BFGS update `B − BssᵀB/(sᵀBs) + yyᵀ/(yᵀs)`.
///
/// Returns [`QuadModelError::CurvatureTooSmall`] when `sᵀy < kappa_min`, or
/// when `sᵀBs ≤ 1e-14·‖s‖²`. The result is re-symmetrized to remove rounding
/// drift.
pub fn bfgs_update(
    b: &DenseSpd,
    pair: &CurvaturePair,
    kappa_min: f64,
) -> Result<DenseSpd, QuadModelError> {
    let d = b.dim();
    pair.s.check_dim(d)?;
    if !(pair.sty >= kappa_min) {
        return Err(QuadModelError::CurvatureTooSmall {
            sty: pair.sty,
            threshold: kappa_min,
        });
    }
    let bs = b.apply(&pair.s);
    let sbs = pair.s.dot(&bs);
    let floor = 1e-14 * pair.s.norm_squared();
    if !(sbs > floor) {
        return Err(QuadModelError::CurvatureTooSmall {
            sty: sbs,
            threshold: floor,
        });
    }
    let bs = bs.as_dvector();
    let y = pair.y.as_dvector();
    let mut next: DMatrix<f64> = b.matrix().clone();
    next.ger(-1.0 / sbs, bs, bs, 1.0);
    next.ger(1.0 / pair.sty, y, y, 1.0);
    let sym = (&next + next.transpose()) * 0.5;
    Ok(DenseSpd::new(sym)?)
}

/// Local quadratic model around `θ_k`.
#[derive(Debug, Clone)]
pub struct QuadraticModel<B = DenseSpd> {
    pub f_value: f64,
    pub gradient: ParamVector,
    pub hessian_approx: B,
}

impl<B: SpdOperator> QuadraticModel<B> {
    pub fn new(f_value: f64, gradient: ParamVector, hessian_approx: B) -> Result<Self, LinalgError> {
        gradient.check_dim(hessian_approx.dim())?;
        Ok(Self {
            f_value,
            gradient,
            hessian_approx,
        })
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn model_eval(&self, dtheta: &ParamVector) -> Result<f64, LinalgError> {
        Ok(self.f_value + self.predicted_reduction(dtheta)?)
    }

    /// Model change `f^q(θ_k + Δθ) − f_k`; negative for a descent step.
    ///
    /// Computed directly from the linear and quadratic terms so that it does
    /// not lose precision to a large `f_k`.
    pub fn predicted_reduction(&self, dtheta: &ParamVector) -> Result<f64, LinalgError> {
        dtheta.check_dim(self.dim())?;
        Ok(self.gradient.dot(dtheta) + 0.5 * quadratic_form(&self.hessian_approx, dtheta)?)
    }
}
