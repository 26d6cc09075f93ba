//! Quasi-Newton trust-region minimization (QNTRM).
//!
//! Each iteration takes a dogleg step under the metric trust region
//! `ΔθᵀF_kΔθ ≤ δ_k`, scores it with the reduction ratio
//! `ν = (f(θ+Δθ) − f(θ)) / (f^q(θ+Δθ) − f^q(θ))`, and then
//!
//! * accepts the step when `ν ≥ ν̲`, growing the radius to `min(δ̄, ω̄δ)` if
//!   additionally `ν ≥ ν̄` and the step sits on the boundary;
//! * otherwise keeps `θ` and shrinks the radius to `ω̲δ`;
//! * forms `s = Δθ`, `y = ∇f(θ+Δθ) − ∇f(θ)` from the trial step (accepted or
//!   not) and applies the BFGS update only when `sᵀy ≥ κ̲`.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dogleg::{dogleg_step_with_fallback, StepKind};
use crate::linalg::{CgConfig, DenseSpd, ParamVector, SpdOperator};
use crate::quadmodel::{bfgs_update, CurvaturePair, QuadModelError, QuadraticModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("objective returned a non-finite value or gradient")]
    NonFinite,
    #[error("objective evaluation failed: {0}")]
    Failed(String),
}

/// A differentiable objective `θ ↦ (f(θ), ∇f(θ))`.
pub trait Objective {
    fn dim(&self) -> usize;

    fn value_grad(&self, theta: &ParamVector) -> Result<(f64, ParamVector), ObjectiveError>;
}

impl<T: Objective + ?Sized> Objective for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn value_grad(&self, theta: &ParamVector) -> Result<(f64, ParamVector), ObjectiveError> {
        (**self).value_grad(theta)
    }
}

impl<T: Objective + ?Sized> Objective for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn value_grad(&self, theta: &ParamVector) -> Result<(f64, ParamVector), ObjectiveError> {
        (**self).value_grad(theta)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrustRegionError {
    #[error("invalid trust-region configuration: {0}")]
    InvalidConfig(String),
    #[error("objective is not finite at the starting point: {0}")]
    ObjectiveNonFinite(ObjectiveError),
    #[error("dimension mismatch: objective has {objective}, start point has {start}")]
    DimensionMismatch { objective: usize, start: usize },
}

/// Parameters of the QNTRM loop. Defaults are the published settings:
/// `ν̲ = 0.1`, `ν̄ = 0.75`, `δ̄ = 0.1`, `κ̲ = 1e-3`, `ω̲ = 0.3`, `ω̄ = 2`,
/// `K = 10`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrustRegionConfig {
    /// Acceptance threshold `ν̲`.
    pub nu_lo: f64,
    /// Expansion threshold `ν̄`.
    pub nu_hi: f64,
    /// Radius cap `δ̄`.
    pub delta_max: f64,
    /// Curvature threshold `κ̲` for the BFGS update.
    pub kappa_min: f64,
    /// Shrink factor `ω̲`.
    pub omega_lo: f64,
    /// Growth factor `ω̄`.
    pub omega_hi: f64,
    /// Iteration limit `K`.
    pub max_iters: usize,
    /// Gradient-norm tolerance `ε`.
    pub grad_tol: f64,
    /// Initial radius `δ₀`; `None` starts at `δ̄`.
    pub delta_init: Option<f64>,
    pub cg: CgConfig,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        Self {
            nu_lo: 0.1,
            nu_hi: 0.75,
            delta_max: 0.1,
            kappa_min: 1e-3,
            omega_lo: 0.3,
            omega_hi: 2.0,
            max_iters: 10,
            grad_tol: 1e-8,
            delta_init: None,
            cg: CgConfig::default(),
        }
    }
}

impl TrustRegionConfig {
    pub fn initial_radius(&self) -> f64 {
        self.delta_init.unwrap_or(self.delta_max)
    }

    pub fn validate(&self) -> Result<(), TrustRegionError> {
        let fail = |msg: String| Err(TrustRegionError::InvalidConfig(msg));
        if !(0.0 < self.nu_lo && self.nu_lo < self.nu_hi && self.nu_hi < 1.0) {
            return fail(format!(
                "need 0 < nu_lo < nu_hi < 1 (nu_lo = {}, nu_hi = {})",
                self.nu_lo, self.nu_hi
            ));
        }
        if !(self.delta_max > 0.0 && self.delta_max < 1.0) {
            return fail(format!("delta_max = {} must lie in (0, 1)", self.delta_max));
        }
        if !(self.kappa_min > 0.0 && self.kappa_min < 1.0) {
            return fail(format!("kappa_min = {} must lie in (0, 1)", self.kappa_min));
        }
        if !(0.0 < self.omega_lo && self.omega_lo < 1.0 && 1.0 < self.omega_hi && self.omega_hi.is_finite()) {
            return fail(format!(
                "need 0 < omega_lo < 1 < omega_hi (omega_lo = {}, omega_hi = {})",
                self.omega_lo, self.omega_hi
            ));
        }
        let d0 = self.initial_radius();
        if !(d0 > 0.0 && d0 <= self.delta_max) {
            return fail(format!("delta_init = {d0} must lie in (0, delta_max]"));
        }
        if !(self.grad_tol >= 0.0) {
            return fail(format!("grad_tol = {} must be nonnegative", self.grad_tol));
        }
        if !(self.cg.rel_tol > 0.0) {
            return fail(format!("cg.rel_tol = {} must be positive", self.cg.rel_tol));
        }
        Ok(())
    }
}

/// `ν = (f_new − f_old) / pred`.
///
/// Returns `−∞`, forcing a rejection, when the trial value is not finite, when
/// the model does not predict a decrease, or when `|pred| ≤ 1e-12·|f_old|`.
pub fn reduction_ratio(f_old: f64, f_new: f64, pred: f64) -> f64 {
    if !f_new.is_finite() || !(pred < 0.0) || pred.abs() <= 1e-12 * f_old.abs() {
        return f64::NEG_INFINITY;
    }
    (f_new - f_old) / pred
}

/// One inner iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    /// Radius `δ_k` used for this step.
    pub delta: f64,
    pub nu: f64,
    pub kind: StepKind,
    pub accepted: bool,
    /// `f_k` and `‖∇f_k‖` at the start of the iteration.
    pub f: f64,
    pub grad_norm: f64,
    /// Model change `f^q(θ_k + Δθ) − f_k`.
    pub predicted: f64,
    /// Trial value `f(θ_k + Δθ)`, `None` when the evaluation failed.
    pub f_trial: Option<f64>,
    pub metric_norm_sq: f64,
    pub on_boundary: bool,
    /// `sᵀy`, `None` when the trial gradient was unavailable.
    pub sty: Option<f64>,
    pub bfgs_updated: bool,
    pub fallback: bool,
    pub delta_next: f64,
}

impl IterationRecord {
    pub const CSV_HEADER: &'static str = "k,delta,nu,kind,accepted,f,grad_norm,predicted,f_trial,metric_norm_sq,on_boundary,sty,bfgs_updated,fallback,delta_next";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        format!(
            "{},{:?},{:?},{},{},{:?},{:?},{:?},{},{:?},{},{},{},{},{:?}",
            self.k,
            self.delta,
            self.nu,
            self.kind.as_str(),
            self.accepted,
            self.f,
            self.grad_norm,
            self.predicted,
            opt(self.f_trial),
            self.metric_norm_sq,
            self.on_boundary,
            opt(self.sty),
            self.bfgs_updated,
            self.fallback,
            self.delta_next
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Termination {
    GradientTolerance,
    IterationLimit,
    /// The metric solve failed; the loop stopped at the last accepted iterate.
    MetricSolveFailed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QntrmTrace {
    pub records: Vec<IterationRecord>,
    /// Objective/gradient evaluations, including the one at `θ₀`.
    pub evaluations: usize,
    pub termination: Termination,
}

impl QntrmTrace {
    pub fn accepted_steps(&self) -> usize {
        self.records.iter().filter(|r| r.accepted).count()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{}", IterationRecord::CSV_HEADER)?;
        for r in &self.records {
            writeln!(out, "{}", r.csv_row())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct QntrmResult {
    pub theta: ParamVector,
    pub f_value: f64,
    pub gradient: ParamVector,
    pub hessian: DenseSpd,
    /// Radius that the next iteration would have used.
    pub delta: f64,
    pub trace: QntrmTrace,
}

/// Runs QNTRM from `theta0`.
///
/// `metric` returns the trust-region operator `F_k` at the current iterate.
/// The returned point never has a larger objective than `theta0`, since
/// rejected steps leave `θ` untouched.
pub fn qntrm_minimize<O, M, Op>(
    objective: &O,
    mut metric: M,
    theta0: ParamVector,
    cfg: &TrustRegionConfig,
    b_init: DenseSpd,
) -> Result<QntrmResult, TrustRegionError>
where
    O: Objective + ?Sized,
    M: FnMut(&ParamVector) -> Op,
    Op: SpdOperator,
{
    cfg.validate()?;
    let d = objective.dim();
    if theta0.len() != d || b_init.dim() != d {
        return Err(TrustRegionError::DimensionMismatch {
            objective: d,
            start: theta0.len(),
        });
    }

    let (mut f, mut grad) = evaluate(objective, &theta0).map_err(TrustRegionError::ObjectiveNonFinite)?;
    let mut theta = theta0;
    let mut b = b_init;
    let mut delta = cfg.initial_radius();
    let mut evaluations = 1;
    let mut records = Vec::with_capacity(cfg.max_iters);
    let mut termination = Termination::IterationLimit;

    for k in 0..cfg.max_iters {
        let grad_norm = grad.norm();
        if grad_norm <= cfg.grad_tol {
            termination = Termination::GradientTolerance;
            break;
        }

        let op = metric(&theta);
        let step = match dogleg_step_with_fallback(&grad, &b, &op, delta, &cfg.cg) {
            Ok(step) => step,
            Err(err) => {
                log::warn!("QNTRM iteration {k}: {err}");
                termination = Termination::MetricSolveFailed(err.to_string());
                break;
            }
        };

        let model = QuadraticModel::new(f, grad.clone(), &b).expect("dimensions checked");
        let predicted = model
            .predicted_reduction(&step.direction)
            .expect("dimensions checked");
        let trial = &theta + &step.direction;
        let trial_eval = evaluate(objective, &trial).ok();
        evaluations += 1;

        let nu = match &trial_eval {
            Some((f_trial, _)) => reduction_ratio(f, *f_trial, predicted),
            None => f64::NEG_INFINITY,
        };
        let accepted = nu >= cfg.nu_lo;
        let on_boundary = step.on_boundary(delta);
        let delta_next = if accepted {
            if nu >= cfg.nu_hi && on_boundary {
                cfg.delta_max.min(cfg.omega_hi * delta)
            } else {
                delta
            }
        } else {
            cfg.omega_lo * delta
        };

        let mut sty = None;
        let mut bfgs_updated = false;
        if let Some((_, trial_grad)) = &trial_eval {
            let y = trial_grad - &grad;
            let pair = CurvaturePair::new(step.direction.clone(), y).expect("dimensions checked");
            sty = Some(pair.sty());
            match bfgs_update(&b, &pair, cfg.kappa_min) {
                Ok(next) => {
                    b = next;
                    bfgs_updated = true;
                }
                Err(QuadModelError::CurvatureTooSmall { .. }) => {}
                Err(err) => log::warn!("QNTRM iteration {k}: BFGS update skipped: {err}"),
            }
        }

        records.push(IterationRecord {
            k,
            delta,
            nu,
            kind: step.kind,
            accepted,
            f,
            grad_norm,
            predicted,
            f_trial: trial_eval.as_ref().map(|(v, _)| *v),
            metric_norm_sq: step.metric_norm_sq,
            on_boundary,
            sty,
            bfgs_updated,
            fallback: step.fallback,
            delta_next,
        });

        if accepted {
            let (f_trial, g_trial) = trial_eval.expect("accepted steps have finite values");
            theta = trial;
            f = f_trial;
            grad = g_trial;
        }
        delta = delta_next;
    }

    if termination == Termination::IterationLimit && grad.norm() <= cfg.grad_tol {
        termination = Termination::GradientTolerance;
    }

    Ok(QntrmResult {
        theta,
        f_value: f,
        gradient: grad,
        hessian: b,
        delta,
        trace: QntrmTrace {
            records,
            evaluations,
            termination,
        },
    })
}

fn evaluate<O: Objective + ?Sized>(
    objective: &O,
    theta: &ParamVector,
) -> Result<(f64, ParamVector), ObjectiveError> {
    let (f, g) = objective.value_grad(theta)?;
    if !f.is_finite() || !g.is_finite() {
        return Err(ObjectiveError::NonFinite);
    }
    Ok((f, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Identity;
    use crate::testfns::{Quadratic, Rosenbrock};

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn default_config_is_valid() {
        TrustRegionConfig::default().validate().unwrap();
        let bad = TrustRegionConfig {
            nu_lo: 0.8,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrustRegionConfig {
            delta_init: Some(0.5),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrustRegionConfig {
            omega_hi: 0.9,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ratio_cases() {
        assert_eq!(reduction_ratio(1.0, 0.5, -0.5), 1.0);
        assert_eq!(reduction_ratio(1.0, 1.0, -1.0), 0.0);
        assert_eq!(reduction_ratio(1.0, 0.0, 0.0), f64::NEG_INFINITY);
        assert_eq!(reduction_ratio(1.0, 2.0, 0.5), f64::NEG_INFINITY);
        assert_eq!(reduction_ratio(1e6, 1e6, -1e-7), f64::NEG_INFINITY);
        assert_eq!(reduction_ratio(1e-12, 0.0, -1e-12), 1.0);
        assert_eq!(reduction_ratio(1.0, f64::NAN, -1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn exact_quadratic_model_has_unit_ratio() {
        let q = Quadratic::with_curvatures(vec![1.0, 1.0]);
        let res = qntrm_minimize(
            &q,
            |_: &ParamVector| Identity(2),
            pv(&[0.1, -0.1]),
            &TrustRegionConfig::default(),
            DenseSpd::identity(2),
        )
        .unwrap();
        let r = &res.trace.records[0];
        assert_eq!(r.kind, StepKind::QuasiNewton);
        assert!((r.nu - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unit_quadratic_lands_on_minimizer() {
        // δ₀ = 10 exceeds the default cap, so widen the cap as well.
        let q = Quadratic::with_curvatures(vec![1.0, 1.0]);
        let cfg = TrustRegionConfig {
            delta_max: 0.99,
            delta_init: Some(0.99),
            ..Default::default()
        };
        // ‖(1,1)‖² = 2 > 0.99, so shrink the start to fit a single QN step
        let res = qntrm_minimize(&q, |_: &ParamVector| Identity(2), pv(&[0.7, 0.7]), &cfg, DenseSpd::identity(2)).unwrap();
        assert_eq!(res.trace.records.len(), 1);
        assert_eq!(res.trace.termination, Termination::GradientTolerance);
        assert!(res.theta.norm() < 1e-15);
    }

    #[test]
    fn all_rejections_leave_theta_and_shrink_radius() {
        // gradient with the wrong sign: every step goes uphill
        struct Liar;
        impl Objective for Liar {
            fn dim(&self) -> usize {
                2
            }
            fn value_grad(&self, t: &ParamVector) -> Result<(f64, ParamVector), ObjectiveError> {
                Ok((0.5 * t.norm_squared(), -t))
            }
        }
        let cfg = TrustRegionConfig::default();
        let theta0 = pv(&[1.0, -2.0]);
        let res = qntrm_minimize(&Liar, |_: &ParamVector| Identity(2), theta0.clone(), &cfg, DenseSpd::identity(2)).unwrap();
        assert_eq!(res.trace.records.len(), cfg.max_iters);
        assert!(res.trace.records.iter().all(|r| !r.accepted));
        assert_eq!(res.theta.as_slice(), theta0.as_slice());
        let expected = cfg.omega_lo.powi(cfg.max_iters as i32) * cfg.delta_max;
        assert!((res.delta - expected).abs() <= 1e-15 * expected);
    }

    #[test]
    fn non_finite_trial_is_rejected() {
        struct Cliff;
        impl Objective for Cliff {
            fn dim(&self) -> usize {
                1
            }
            fn value_grad(&self, t: &ParamVector) -> Result<(f64, ParamVector), ObjectiveError> {
                if t[0] < 0.9 {
                    Err(ObjectiveError::NonFinite)
                } else {
                    Ok((t[0], pv(&[1.0])))
                }
            }
        }
        let res = qntrm_minimize(&Cliff, |_: &ParamVector| Identity(1), pv(&[1.0]), &TrustRegionConfig::default(), DenseSpd::identity(1)).unwrap();
        let r = &res.trace.records[0];
        assert!(!r.accepted);
        assert_eq!(r.nu, f64::NEG_INFINITY);
        assert_eq!(r.f_trial, None);
        assert!(!r.bfgs_updated);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let r = Rosenbrock::new(2);
        let res = qntrm_minimize(&r, |_: &ParamVector| Identity(2), pv(&[1e200, 1e200]), &TrustRegionConfig::default(), DenseSpd::identity(2));
        assert!(matches!(res, Err(TrustRegionError::ObjectiveNonFinite(_))));
    }

    #[test]
    fn rosenbrock_ratio_near_one_with_exact_hessian() {
        let r = Rosenbrock::new(2);
        let x = r.standard_start();
        let (f0, g) = r.value_grad(&x).unwrap();
        let b = DenseSpd::new(r.hessian(&x)).unwrap();
        let step = crate::dogleg::dogleg_step(&g, &b, &Identity(2), 1e-4, &CgConfig::default()).unwrap();
        let model = QuadraticModel::new(f0, g, &b).unwrap();
        let pred = model.predicted_reduction(&step.direction).unwrap();
        let f1 = r.value_grad(&(&x + &step.direction)).unwrap().0;
        let nu = reduction_ratio(f0, f1, pred);
        assert!(nu > 0.9 && nu < 1.1, "ν = {nu}");
    }

    #[test]
    fn trace_csv_has_one_row_per_iteration() {
        let r = Rosenbrock::new(2);
        let res = qntrm_minimize(&r, |_: &ParamVector| Identity(2), r.standard_start(), &TrustRegionConfig::default(), DenseSpd::identity(2)).unwrap();
        let mut buf = Vec::new();
        res.trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), res.trace.records.len() + 1);
        assert!(text.starts_with("k,delta,nu,kind"));
    }
}
