//! Dogleg step for `min f^q(θ_k + Δθ)` subject to `ΔθᵀFΔθ ≤ δ`.
//!
//! The radius `δ` bounds the *squared* `F`-norm of the step. The path runs
//! from the origin to the curvature-scaled natural-gradient point
//! `Δθ_GD = −β F⁻¹∇f`, then on to the quasi-Newton point `Δθ_QN = −B⁻¹∇f`:
//!
//! 1. return `Δθ_QN` if it is feasible;
//! 2. otherwise, if `Δθ_GD` lies on or outside the boundary, return it scaled
//!    back onto the boundary;
//! 3. otherwise return `Δθ_GD + τ(Δθ_QN − Δθ_GD)` with the largest `τ ∈ [0,1]`
//!    that lands on the boundary.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cg_solve_with, quadratic_form, CgConfig, LinalgError, ParamVector, SpdOperator};

/// Relative tolerance for "the step lies on the trust-region boundary".
pub const BOUNDARY_REL_TOL: f64 = 1e-6;

/// Denominator floor in the optimal gradient stepsize.
pub const DEGENERATE_CURVATURE: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DoglegError {
    #[error("CG solve against the {system} operator failed: {source}")]
    CgFailure {
        system: &'static str,
        source: LinalgError,
    },
    #[error("gradient-direction curvature {0:e} is degenerate")]
    DegenerateCurvature(f64),
    #[error("no real root for the dogleg interpolation (discriminant {0:e})")]
    NoRealRoot(f64),
    #[error("invalid trust radius {0}")]
    InvalidRadius(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepKind {
    QuasiNewton,
    ScaledGradientBoundary,
    DoglegInterpolated,
}

impl StepKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepKind::QuasiNewton => "quasi_newton",
            StepKind::ScaledGradientBoundary => "scaled_gradient_boundary",
            StepKind::DoglegInterpolated => "dogleg_interpolated",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoglegStep {
    pub direction: ParamVector,
    pub kind: StepKind,
    pub tau: Option<f64>,
    pub beta: Option<f64>,
    /// `ΔθᵀFΔθ`
    pub metric_norm_sq: f64,
    /// Set when a solve failed and the step fell back to the TRPO-style
    /// boundary-scaled natural gradient with unit stepsize.
    pub fallback: bool,
}

impl DoglegStep {
    pub fn on_boundary(&self, delta: f64) -> bool {
        (self.metric_norm_sq - delta).abs() <= BOUNDARY_REL_TOL * delta
    }
}

fn cg_failure(system: &'static str) -> impl FnOnce(LinalgError) -> DoglegError {
    move |source| DoglegError::CgFailure { system, source }
}

fn solve<A: SpdOperator + ?Sized>(
    op: &A,
    rhs: &ParamVector,
    cg: &CgConfig,
    system: &'static str,
) -> Result<ParamVector, DoglegError> {
    let report = cg_solve_with(op, rhs, cg).map_err(cg_failure(system))?;
    if !report.converged {
        log::debug!(
            "CG on {system} stopped at the iteration limit ({} its, residual {:e})",
            report.iterations,
            report.residual_norm
        );
    }
    Ok(report.solution)
}

/// `β = ∇fᵀF⁻¹∇f / ((F⁻¹∇f)ᵀB(F⁻¹∇f))` given the natural gradient `F⁻¹∇f`.
fn stepsize_from_natural<B: SpdOperator + ?Sized>(
    grad: &ParamVector,
    natural: &ParamVector,
    b: &B,
) -> Result<f64, DoglegError> {
    let num = grad.dot(natural);
    let den = quadratic_form(b, natural)?;
    if !(den > DEGENERATE_CURVATURE) || !(num > 0.0) {
        return Err(DoglegError::DegenerateCurvature(den));
    }
    Ok(num / den)
}

/// Minimizer of the quadratic model along `−F⁻¹∇f`.
pub fn optimal_gradient_stepsize<F: SpdOperator + ?Sized, B: SpdOperator + ?Sized>(
    grad: &ParamVector,
    f: &F,
    b: &B,
    cg: &CgConfig,
) -> Result<f64, DoglegError> {
    grad.check_dim(f.dim())?;
    grad.check_dim(b.dim())?;
    let natural = solve(f, grad, cg, "metric")?;
    stepsize_from_natural(grad, &natural, b)
}

/// Largest root in `[0,1]` of `(gd + τ(qn − gd))ᵀF(gd + τ(qn − gd)) = δ`.
pub fn tau_root<F: SpdOperator + ?Sized>(
    gd: &ParamVector,
    qn: &ParamVector,
    f: &F,
    delta: f64,
) -> Result<f64, DoglegError> {
    let diff = qn - gd;
    let f_diff = f.apply(&diff);
    let a = diff.dot(&f_diff);
    let b = 2.0 * gd.dot(&f_diff);
    let c = quadratic_form(f, gd)? - delta;
    tau_from_coefficients(a, b, c)
}

fn tau_from_coefficients(a: f64, b: f64, c: f64) -> Result<f64, DoglegError> {
    let disc = b * b - 4.0 * a * c;
    if !(disc >= -1e-12) || !(a > 0.0) {
        return Err(DoglegError::NoRealRoot(disc));
    }
    let sq = disc.max(0.0).sqrt();
    // larger root; written to avoid cancellation when b > 0
    let tau = if b > 0.0 {
        (-2.0 * c) / (b + sq)
    } else {
        (-b + sq) / (2.0 * a)
    };
    if !(-1e-12..=1.0 + 1e-12).contains(&tau) {
        return Err(DoglegError::NoRealRoot(disc));
    }
    Ok(tau.clamp(0.0, 1.0))
}

fn boundary_scaled(
    gd: ParamVector,
    gd_norm_sq: f64,
    delta: f64,
    beta: Option<f64>,
    fallback: bool,
) -> DoglegStep {
    let direction = gd.scaled((delta / gd_norm_sq).sqrt());
    DoglegStep {
        direction,
        kind: StepKind::ScaledGradientBoundary,
        tau: None,
        beta,
        metric_norm_sq: delta,
        fallback,
    }
}

fn finish_metric<F: SpdOperator + ?Sized>(step: DoglegStep, f: &F) -> Result<DoglegStep, DoglegError> {
    let metric_norm_sq = quadratic_form(f, &step.direction)?;
    Ok(DoglegStep {
        metric_norm_sq,
        ..step
    })
}

/// Dogleg step without fallbacks: any failed solve or degenerate curvature
/// is returned as an error.
pub fn dogleg_step<B: SpdOperator + ?Sized, F: SpdOperator + ?Sized>(
    grad: &ParamVector,
    b: &B,
    f: &F,
    delta: f64,
    cg: &CgConfig,
) -> Result<DoglegStep, DoglegError> {
    let (qn, natural) = prepare(grad, b, f, delta, cg)?;
    assemble(grad, qn?, &natural, b, f, delta, false)
}

/// Dogleg step with the degradations used inside the trust-region loop:
/// a failed `B` solve falls back to the boundary-scaled natural gradient with
/// `β = 1`, and degenerate curvature along `F⁻¹∇f` uses `β = 1`. A failed `F`
/// solve is still an error because no metric direction is available.
pub fn dogleg_step_with_fallback<B: SpdOperator + ?Sized, F: SpdOperator + ?Sized>(
    grad: &ParamVector,
    b: &B,
    f: &F,
    delta: f64,
    cg: &CgConfig,
) -> Result<DoglegStep, DoglegError> {
    let (qn, natural) = prepare(grad, b, f, delta, cg)?;
    match qn {
        Ok(qn) => assemble(grad, qn, &natural, b, f, delta, true),
        Err(err) => {
            log::warn!("quasi-Newton solve failed ({err}); using boundary-scaled natural gradient");
            let gd = -&natural;
            let gd_norm_sq = quadratic_form(f, &gd)?;
            let step = boundary_scaled(gd, gd_norm_sq, delta, Some(1.0), true);
            finish_metric(step, f)
        }
    }
}

type Prepared = (Result<ParamVector, DoglegError>, ParamVector);

fn prepare<B: SpdOperator + ?Sized, F: SpdOperator + ?Sized>(
    grad: &ParamVector,
    b: &B,
    f: &F,
    delta: f64,
    cg: &CgConfig,
) -> Result<Prepared, DoglegError> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(DoglegError::InvalidRadius(delta));
    }
    grad.check_dim(b.dim())?;
    grad.check_dim(f.dim())?;
    if let Some(index) = grad.iter().position(|x| !x.is_finite()) {
        return Err(LinalgError::NonFiniteEntry { index }.into());
    }
    let qn = solve(b, grad, cg, "hessian").map(|x| -x);
    let natural = solve(f, grad, cg, "metric")?;
    Ok((qn, natural))
}

fn assemble<B: SpdOperator + ?Sized, F: SpdOperator + ?Sized>(
    grad: &ParamVector,
    qn: ParamVector,
    natural: &ParamVector,
    b: &B,
    f: &F,
    delta: f64,
    unit_beta_on_degenerate: bool,
) -> Result<DoglegStep, DoglegError> {
    let qn_norm_sq = quadratic_form(f, &qn)?;
    if qn_norm_sq <= delta {
        return Ok(DoglegStep {
            direction: qn,
            kind: StepKind::QuasiNewton,
            tau: None,
            beta: None,
            metric_norm_sq: qn_norm_sq,
            fallback: false,
        });
    }

    let (beta, fallback) = match stepsize_from_natural(grad, natural, b) {
        Ok(beta) => (beta, false),
        Err(err) if unit_beta_on_degenerate => {
            log::debug!("{err}; using unit gradient stepsize");
            (1.0, true)
        }
        Err(err) => return Err(err),
    };
    let gd = natural.scaled(-beta);
    let gd_norm_sq = quadratic_form(f, &gd)?;
    if gd_norm_sq >= delta {
        let step = boundary_scaled(gd, gd_norm_sq, delta, Some(beta), fallback);
        return finish_metric(step, f);
    }

    let tau = tau_root(&gd, &qn, f, delta)?;
    let mut direction = gd.clone();
    direction.axpy(tau, &(&qn - &gd));
    let metric_norm_sq = quadratic_form(f, &direction)?;
    Ok(DoglegStep {
        direction,
        kind: StepKind::DoglegInterpolated,
        tau: Some(tau),
        beta: Some(beta),
        metric_norm_sq,
        fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{DenseSpd, Identity};
    use crate::quadmodel::QuadraticModel;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn rand_spd(rng: &mut ChaCha8Rng, d: usize) -> DenseSpd {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let m = &a * a.transpose() + DMatrix::identity(d, d) * 0.2;
        DenseSpd::new((&m + m.transpose()) * 0.5).unwrap()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, d: usize) -> ParamVector {
        ParamVector::from_dvector(DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)))
    }

    fn cg() -> CgConfig {
        CgConfig::default()
    }

    #[test]
    fn identity_metric_stepsize_is_one() {
        let g = pv(&[0.3, -1.2, 2.0]);
        let beta = optimal_gradient_stepsize(&g, &Identity(3), &Identity(3), &cg()).unwrap();
        assert!((beta - 1.0).abs() < 1e-14);
        let two = DenseSpd::from_diagonal(&[2.0, 2.0, 2.0]);
        let beta = optimal_gradient_stepsize(&g, &Identity(3), &two, &cg()).unwrap();
        assert!((beta - 0.5).abs() < 1e-14);
    }

    // golden-section search of t ↦ f^q(−t F⁻¹g), independent of the closed form
    fn golden_min(h: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let r = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let a = hi - r * (hi - lo);
            let b = lo + r * (hi - lo);
            if h(a) < h(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn stepsize_matches_line_minimization() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let f = rand_spd(&mut rng, 5);
            let b = rand_spd(&mut rng, 5);
            let g = rand_vec(&mut rng, 5);
            let beta = optimal_gradient_stepsize(&g, &f, &b, &cg()).unwrap();
            let natural = f.matrix().clone().cholesky().unwrap().solve(g.as_dvector());
            let model = QuadraticModel::new(0.0, g.clone(), b.clone()).unwrap();
            let h = |t: f64| {
                model
                    .model_eval(&ParamVector::from_dvector(&natural * -t))
                    .unwrap()
            };
            let t = golden_min(h, 0.0, 100.0 * beta.max(1.0));
            assert!((beta - t).abs() <= 1e-6 * beta, "{beta} vs {t}");
        }
    }

    #[test]
    fn degenerate_curvature_detected() {
        let tiny = DenseSpd::from_diagonal(&[1e-20, 1e-20]);
        let err = optimal_gradient_stepsize(&pv(&[1e-3, 0.0]), &Identity(2), &tiny, &cg());
        assert!(matches!(err, Err(DoglegError::DegenerateCurvature(_))));
    }

    #[test]
    fn interior_quasi_newton_step() {
        let s = dogleg_step(&pv(&[1.0, 0.0]), &Identity(2), &Identity(2), 4.0, &cg()).unwrap();
        assert_eq!(s.kind, StepKind::QuasiNewton);
        assert_eq!(s.direction, pv(&[-1.0, 0.0]));
        assert_eq!(s.metric_norm_sq, 1.0);
    }

    #[test]
    fn boundary_scaled_gradient_step() {
        let s = dogleg_step(&pv(&[1.0, 0.0]), &Identity(2), &Identity(2), 0.25, &cg()).unwrap();
        assert_eq!(s.kind, StepKind::ScaledGradientBoundary);
        assert!((s.direction[0] + 0.5).abs() < 1e-15 && s.direction[1] == 0.0);
        assert!((s.metric_norm_sq - 0.25).abs() < 1e-15);
        assert!(s.on_boundary(0.25));
    }

    #[test]
    fn interpolated_step_between_points() {
        let b = DenseSpd::from_diagonal(&[1.0, 10.0]);
        let g = pv(&[1.0, 1.0]);
        // β = 2/11, ‖GD‖² = 8/121 ≈ 0.066, ‖QN‖² = 1.01
        let s = dogleg_step(&g, &b, &Identity(2), 0.5, &cg()).unwrap();
        assert_eq!(s.kind, StepKind::DoglegInterpolated);
        let tau = s.tau.unwrap();
        assert!(tau > 0.0 && tau < 1.0);
        assert!((s.metric_norm_sq - 0.5).abs() <= 1e-6 * 0.5);
        assert!((s.beta.unwrap() - 2.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn tau_root_cases() {
        let qn = pv(&[2.0, 0.0]);
        let tau = tau_root(&ParamVector::zeros(2), &qn, &Identity(2), 1.0).unwrap();
        assert!((tau - 0.5).abs() < 1e-15);
        let gd = pv(&[0.1, 0.1]);
        assert!(matches!(
            tau_root(&gd, &gd, &Identity(2), 1.0),
            Err(DoglegError::NoRealRoot(_))
        ));
    }

    #[test]
    fn tau_root_substitutes_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut checked = 0;
        while checked < 50 {
            let f = rand_spd(&mut rng, 6);
            let gd = rand_vec(&mut rng, 6);
            let qn = &gd + &rand_vec(&mut rng, 6).scaled(3.0);
            let lo = quadratic_form(&f, &gd).unwrap();
            let hi = quadratic_form(&f, &qn).unwrap();
            if !(lo < hi) {
                continue;
            }
            let delta = lo + rng.random_range(0.05..0.95) * (hi - lo);
            let tau = tau_root(&gd, &qn, &f, delta).unwrap();
            let mut p = gd.clone();
            p.axpy(tau, &(&qn - &gd));
            let value = quadratic_form(&f, &p).unwrap();
            assert!((value - delta).abs() <= 1e-10 * delta);
            checked += 1;
        }
    }

    #[test]
    fn invalid_radius_rejected() {
        let r = dogleg_step(&pv(&[1.0]), &Identity(1), &Identity(1), 0.0, &cg());
        assert!(matches!(r, Err(DoglegError::InvalidRadius(_))));
    }

    #[test]
    fn hessian_solve_failure_falls_back() {
        let indefinite = DenseSpd::from_diagonal(&[1.0, -1.0]);
        let g = pv(&[1.0, 1.0]);
        assert!(matches!(
            dogleg_step(&g, &indefinite, &Identity(2), 0.1, &cg()),
            Err(DoglegError::CgFailure { system: "hessian", .. })
        ));
        let s = dogleg_step_with_fallback(&g, &indefinite, &Identity(2), 0.1, &cg()).unwrap();
        assert!(s.fallback);
        assert_eq!(s.kind, StepKind::ScaledGradientBoundary);
        assert!((s.metric_norm_sq - 0.1).abs() < 1e-12);
        let expected = g.scaled(-(0.1f64 / 2.0).sqrt());
        assert!((&s.direction - &expected).norm() < 1e-12);
    }

    #[test]
    fn metric_solve_failure_is_an_error() {
        let indefinite = DenseSpd::from_diagonal(&[1.0, -1.0]);
        let g = pv(&[1.0, 1.0]);
        assert!(matches!(
            dogleg_step_with_fallback(&g, &Identity(2), &indefinite, 0.1, &cg()),
            Err(DoglegError::CgFailure { system: "metric", .. })
        ));
    }

    #[test]
    fn path_is_monotone_in_metric_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        let mut checked = 0;
        while checked < 200 {
            let d = rng.random_range(2..=8);
            let f = rand_spd(&mut rng, d);
            let b = rand_spd(&mut rng, d);
            let g = rand_vec(&mut rng, d);
            let fi = f.matrix().clone().cholesky().unwrap();
            let natural = ParamVector::from_dvector(fi.solve(g.as_dvector()));
            let qn = ParamVector::from_dvector(
                -b.matrix().clone().cholesky().unwrap().solve(g.as_dvector()),
            );
            let beta = stepsize_from_natural(&g, &natural, &b).unwrap();
            let gd = natural.scaled(-beta);
            let lo = quadratic_form(&f, &gd).unwrap();
            let hi = quadratic_form(&f, &qn).unwrap();
            if !(lo < hi) {
                continue;
            }
            let mut prev = lo;
            for i in 1..=100 {
                let tau = i as f64 / 100.0;
                let mut p = gd.clone();
                p.axpy(tau, &(&qn - &gd));
                let v = quadratic_form(&f, &p).unwrap();
                assert!(v >= prev - 1e-12 * hi, "non-monotone at τ={tau}");
                prev = v;
            }
            checked += 1;
        }
    }
}
