use serde::{Deserialize, Serialize};

use crate::linalg::{cg_solve_with, quadratic_form, CgConfig, ParamVector, SpdOperator};
use crate::trustregion::Objective;

/// Backtracking schedule `α = c^j`, `j = 0, …, max_backtracks`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LsConfig {
    pub c: f64,
    pub max_backtracks: usize,
}

impl Default for LsConfig {
    fn default() -> Self {
        Self { c: 0.5, max_backtracks: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrpoStep {
    pub theta: ParamVector,
    pub accepted: bool,
    /// Step fraction taken; zero when no trial was accepted.
    pub alpha: f64,
    pub backtracks: usize,
    pub f_before: f64,
    pub f_after: f64,
    /// `mean_kl(θ_old, θ)` of the returned point.
    pub kl: f64,
    pub evaluations: usize,
}

/// One natural-gradient step with KL-checked backtracking.
///
/// The direction `d = F⁻¹∇f` is scaled so that `dᵀFd = δ`; the largest
/// `α = c^j` with `f(θ_old − αd) < f(θ_old)` and `mean_kl ≤ δ` is taken.
/// `kl(θ)` measures the divergence from `θ_old`, normally
/// [`mean_kl`](crate::policy::mean_kl) over the batch states.
/// Returns `θ_old` unchanged if every trial fails or the solve breaks down.
pub fn trpo_baseline_step<O, F, K>(
    objective: &O,
    theta_old: &ParamVector,
    fisher: &F,
    kl: K,
    delta: f64,
    ls: &LsConfig,
    cg: &CgConfig,
) -> TrpoStep
where
    O: Objective + ?Sized,
    F: SpdOperator + ?Sized,
    K: Fn(&ParamVector) -> f64,
{
    let theta_old = theta_old.clone();
    let unchanged = |f: f64, evaluations: usize| TrpoStep {
        theta: theta_old.clone(),
        accepted: false,
        alpha: 0.0,
        backtracks: 0,
        f_before: f,
        f_after: f,
        kl: 0.0,
        evaluations,
    };
    let (f0, grad) = match objective.value_grad(&theta_old) {
        Ok(v) => v,
        Err(err) => {
            log::warn!("TRPO step: objective failed at θ_old: {err}");
            return unchanged(f64::NAN, 1);
        }
    };
    let direction = match cg_solve_with(fisher, &grad, cg) {
        Ok(report) => report.solution,
        Err(err) => {
            log::warn!("TRPO step: metric solve failed: {err}");
            return unchanged(f0, 1);
        }
    };
    let curvature = quadratic_form(fisher, &direction).unwrap_or(0.0);
    if !(curvature > 0.0 && curvature.is_finite()) {
        return unchanged(f0, 1);
    }
    let full = direction.scaled((delta / curvature).sqrt());
    let mut evaluations = 1;
    let mut alpha = 1.0;
    for j in 0..=ls.max_backtracks {
        let trial = &theta_old - &full.scaled(alpha);
        evaluations += 1;
        if let Ok((f, _)) = objective.value_grad(&trial) {
            let kl = kl(&trial);
            if f < f0 && kl <= delta {
                return TrpoStep {
                    theta: trial,
                    accepted: true,
                    alpha,
                    backtracks: j,
                    f_before: f0,
                    f_after: f,
                    kl,
                    evaluations,
                };
            }
        }
        alpha *= ls.c;
    }
    let mut step = unchanged(f0, evaluations);
    step.backtracks = ls.max_backtracks;
    step
}
