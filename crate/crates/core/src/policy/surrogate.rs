use nalgebra::{DMatrix, DVector};

use super::{categorical_kl, gaussian_kl, Action, Observation, PolicyError, PolicySpec, RolloutBatch};
use crate::linalg::{ParamVector, SpdOperator};
use crate::trustregion::{Objective, ObjectiveError};

/// Importance ratios with a larger log are treated as overflow.
const MAX_LOG_RATIO: f64 = 700.0;
/// Lower bound on relative damping, so that `F + λI` stays invertible when
/// the Fisher matrix vanishes (e.g. a deterministic softmax).
const MIN_DAMPING: f64 = 1e-10;

/// The batch's state distribution, reduced to what the KL and Fisher
/// computations need.
#[derive(Debug, Clone, PartialEq)]
pub enum StateStats {
    /// Fraction of batch steps spent in each state.
    Tabular { weights: Vec<f64> },
    /// Batch mean of `φφᵀ`.
    Features { second_moment: DMatrix<f64> },
}

impl StateStats {
    pub fn from_batch(policy: &PolicySpec, batch: &RolloutBatch) -> Result<Self, PolicyError> {
        let n = batch.num_steps();
        if n == 0 {
            return Err(PolicyError::EmptyBatch);
        }
        let scale = 1.0 / n as f64;
        match *policy {
            PolicySpec::TabularSoftmax { n_states, .. } => {
                let mut weights = vec![0.0; n_states];
                for obs in batch.observations() {
                    policy.check_observation(obs)?;
                    let Observation::Discrete(s) = obs else { unreachable!() };
                    weights[*s] += scale;
                }
                Ok(StateStats::Tabular { weights })
            }
            PolicySpec::LinearGaussian { n_features, .. } => {
                let mut m = DMatrix::zeros(n_features, n_features);
                for obs in batch.observations() {
                    policy.check_observation(obs)?;
                    let Observation::Continuous(x) = obs else { unreachable!() };
                    let phi = DVector::from_column_slice(x);
                    m.ger(scale, &phi, &phi, 1.0);
                }
                Ok(StateStats::Features { second_moment: m })
            }
        }
    }
}

/// Batch-averaged `KL(π_θold ‖ π_θ)`.
///
/// For the linear-Gaussian family the average is exact through the second
/// moment of the features, since the KL is quadratic in the mean shift.
pub fn mean_kl(policy: &PolicySpec, theta_old: &ParamVector, theta: &ParamVector, stats: &StateStats) -> f64 {
    match (*policy, stats) {
        (PolicySpec::TabularSoftmax { n_actions, .. }, StateStats::Tabular { weights }) => weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(s, w)| {
                let r = s * n_actions..(s + 1) * n_actions;
                w * categorical_kl(&theta_old.as_slice()[r.clone()], &theta.as_slice()[r])
            })
            .sum(),
        (
            PolicySpec::LinearGaussian {
                n_features,
                action_dim,
                ..
            },
            StateStats::Features { second_moment },
        ) => {
            let diff = theta.as_dvector() - theta_old.as_dvector();
            let mean_sq: Vec<f64> = (0..action_dim)
                .map(|j| {
                    let dw = diff.rows(j * n_features, n_features);
                    (dw.transpose() * second_moment * dw)[(0, 0)].max(0.0)
                })
                .collect();
            let off = action_dim * n_features;
            gaussian_kl(&theta_old.as_slice()[off..], &theta.as_slice()[off..], &mean_sq)
        }
        _ => panic!("state statistics do not match the policy family"),
    }
}

#[derive(Debug, Clone)]
enum FisherForm {
    Categorical {
        n_actions: usize,
        weights: Vec<f64>,
        /// `π_θold(a|s)` flattened like `θ`.
        probs: Vec<f64>,
    },
    Gaussian {
        n_features: usize,
        action_dim: usize,
        second_moment: DMatrix<f64>,
        /// `1/σ_j²` at `θ_old`.
        inv_var: Vec<f64>,
    },
}

/// `v ↦ (F + λI)v` with `F` the Hessian of [`mean_kl`] in `θ` at `θ_old`.
///
/// Categorical blocks are `w_s (diag(p_s) − p_s p_sᵀ)`; for the Gaussian
/// family each row of `W` gets `E[φφᵀ]/σ_j²` and each `log σ_j` gets `2`.
#[derive(Debug, Clone)]
pub struct FisherOperator {
    form: FisherForm,
    damping: f64,
    dim: usize,
}

impl FisherOperator {
    pub fn new(policy: &PolicySpec, theta_old: &ParamVector, stats: &StateStats, damping: f64) -> Self {
        assert!(damping >= 0.0, "damping must be nonnegative");
        let form = match (*policy, stats) {
            (PolicySpec::TabularSoftmax { n_states, n_actions }, StateStats::Tabular { weights }) => {
                let probs = (0..n_states).flat_map(|s| policy.action_probs(theta_old, s)).collect();
                FisherForm::Categorical {
                    n_actions,
                    weights: weights.clone(),
                    probs,
                }
            }
            (
                PolicySpec::LinearGaussian {
                    n_features,
                    action_dim,
                    ..
                },
                StateStats::Features { second_moment },
            ) => FisherForm::Gaussian {
                n_features,
                action_dim,
                second_moment: second_moment.clone(),
                inv_var: theta_old.as_slice()[action_dim * n_features..]
                    .iter()
                    .map(|l| (-2.0 * l).exp())
                    .collect(),
            },
            _ => panic!("state statistics do not match the policy family"),
        };
        Self {
            form,
            damping,
            dim: policy.dim(),
        }
    }

    /// Damping set to `relative` times the mean diagonal of `F`.
    pub fn with_relative_damping(
        policy: &PolicySpec,
        theta_old: &ParamVector,
        stats: &StateStats,
        relative: f64,
    ) -> Self {
        let mut op = Self::new(policy, theta_old, stats, 0.0);
        if relative > 0.0 {
            op.damping = (relative * op.mean_diagonal()).max(MIN_DAMPING);
        }
        op
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    /// `tr(F)/d`, without damping.
    pub fn mean_diagonal(&self) -> f64 {
        let trace = match &self.form {
            FisherForm::Categorical {
                n_actions,
                weights,
                probs,
            } => weights
                .iter()
                .zip(probs.chunks(*n_actions))
                .map(|(w, p)| w * p.iter().map(|x| x * (1.0 - x)).sum::<f64>())
                .sum::<f64>(),
            FisherForm::Gaussian {
                action_dim,
                second_moment,
                inv_var,
                ..
            } => second_moment.trace() * inv_var.iter().sum::<f64>() + 2.0 * *action_dim as f64,
        };
        trace / self.dim as f64
    }
}

impl SpdOperator for FisherOperator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &ParamVector) -> ParamVector {
        let x = v.as_slice();
        let mut out = vec![0.0; self.dim];
        match &self.form {
            FisherForm::Categorical {
                n_actions,
                weights,
                probs,
            } => {
                let na = *n_actions;
                for (s, w) in weights.iter().enumerate() {
                    if *w == 0.0 {
                        continue;
                    }
                    let p = &probs[s * na..(s + 1) * na];
                    let vs = &x[s * na..(s + 1) * na];
                    let pv: f64 = p.iter().zip(vs).map(|(a, b)| a * b).sum();
                    for a in 0..na {
                        out[s * na + a] = w * p[a] * (vs[a] - pv);
                    }
                }
            }
            FisherForm::Gaussian {
                n_features,
                action_dim,
                second_moment,
                inv_var,
            } => {
                let nf = *n_features;
                for j in 0..*action_dim {
                    let row = DVector::from_column_slice(&x[j * nf..(j + 1) * nf]);
                    let mv = second_moment * row * inv_var[j];
                    out[j * nf..(j + 1) * nf].copy_from_slice(mv.as_slice());
                    let k = action_dim * nf + j;
                    out[k] = 2.0 * x[k];
                }
            }
        }
        if self.damping > 0.0 {
            for (o, xi) in out.iter_mut().zip(x) {
                *o += self.damping * xi;
            }
        }
        ParamVector::from_dvector(out.into())
    }
}

/// `f(θ) = −c·mean_t[exp(log π_θ(a_t|s_t) − log π_θold(a_t|s_t))·A_t]`, the
/// negated importance-sampled surrogate anchored at the sampling policy.
///
/// The scale `c` defaults to 1. Setting it to the batch's
/// [`RolloutBatch::visitation_mass`] weights states by unnormalized
/// discounted visitation frequencies instead of a probability distribution.
#[derive(Debug, Clone)]
pub struct SurrogateObjective {
    policy: PolicySpec,
    theta_old: ParamVector,
    observations: Vec<Observation>,
    actions: Vec<Action>,
    log_probs_old: Vec<f64>,
    advantages: Vec<f64>,
    scale: f64,
}

impl SurrogateObjective {
    pub fn new(policy: PolicySpec, theta_old: ParamVector, batch: &RolloutBatch) -> Result<Self, PolicyError> {
        policy.check_theta(&theta_old)?;
        batch.check_policy(&policy)?;
        let advantages = batch.advantages().ok_or(PolicyError::MissingAdvantages)?.to_vec();
        if advantages.is_empty() {
            return Err(PolicyError::EmptyBatch);
        }
        let (mut observations, mut actions, mut log_probs_old) = (Vec::new(), Vec::new(), Vec::new());
        for (o, a, l) in batch.transitions() {
            observations.push(o.clone());
            actions.push(a.clone());
            log_probs_old.push(l);
        }
        Ok(Self {
            policy,
            theta_old,
            observations,
            actions,
            log_probs_old,
            advantages,
            scale: 1.0,
        })
    }

    /// Multiplies the objective (and its gradient) by `scale > 0`.
    pub fn with_scale(mut self, scale: f64) -> Self {
        assert!(scale > 0.0 && scale.is_finite(), "surrogate scale must be positive and finite");
        self.scale = scale;
        self
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn policy(&self) -> &PolicySpec {
        &self.policy
    }

    pub fn theta_old(&self) -> &ParamVector {
        &self.theta_old
    }

    pub fn num_samples(&self) -> usize {
        self.advantages.len()
    }

    pub fn evaluate(&self, theta: &ParamVector) -> Result<(f64, ParamVector), PolicyError> {
        self.policy.check_theta(theta)?;
        let n = self.advantages.len() as f64;
        let mut value = 0.0;
        let mut grad = vec![0.0; self.policy.dim()];
        for (i, ((o, a), (lp_old, adv))) in self
            .observations
            .iter()
            .zip(&self.actions)
            .zip(self.log_probs_old.iter().zip(&self.advantages))
            .enumerate()
        {
            let log_ratio = self.policy.log_prob(theta, o, a) - lp_old;
            if !(log_ratio <= MAX_LOG_RATIO) {
                return Err(PolicyError::NonFiniteRatio { index: i, log_ratio });
            }
            let w = log_ratio.exp() * adv * self.scale / n;
            value -= w;
            if w != 0.0 {
                self.policy.accumulate_grad_log_prob(theta, o, a, -w, &mut grad);
            }
        }
        Ok((value, ParamVector::from_dvector(grad.into())))
    }

    /// `c·mean_t[∇log π_θold(a_t|s_t)·A_t]`, the plain policy-gradient estimate.
    pub fn policy_gradient(&self) -> ParamVector {
        let n = self.advantages.len() as f64 / self.scale;
        let mut grad = vec![0.0; self.policy.dim()];
        for ((o, a), adv) in self.observations.iter().zip(&self.actions).zip(&self.advantages) {
            self.policy
                .accumulate_grad_log_prob(&self.theta_old, o, a, adv / n, &mut grad);
        }
        ParamVector::from_dvector(grad.into())
    }
}

impl Objective for SurrogateObjective {
    fn dim(&self) -> usize {
        self.policy.dim()
    }

    fn value_grad(&self, theta: &ParamVector) -> Result<(f64, ParamVector), ObjectiveError> {
        self.evaluate(theta).map_err(|e| match e {
            PolicyError::NonFiniteRatio { .. } => ObjectiveError::NonFinite,
            other => ObjectiveError::Failed(other.to_string()),
        })
    }
}
