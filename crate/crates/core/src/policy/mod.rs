//! Stochastic policies with analytic log-likelihood gradients, and the
//! surrogate objective, KL divergence and Fisher metric built on them.
//!
//! Two families are supported:
//!
//! * [`PolicySpec::TabularSoftmax`]: `π(a|s) ∝ exp(θ[s·n_a + a])`.
//! * [`PolicySpec::LinearGaussian`]: `a ~ N(Wφ(s), diag(σ²))` with `W`
//!   stored row-major in the first `action_dim·n_features` entries of `θ`
//!   followed by `log σ`.

mod batch;
mod surrogate;

pub use batch::{gae_advantages, Episode, RolloutBatch, BATCH_CSV_HEADER};
pub use surrogate::{mean_kl, FisherOperator, StateStats, SurrogateObjective};

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::ParamVector;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("parameter vector has length {actual}, policy expects {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("observation does not fit the policy: {0}")]
    BadObservation(String),
    #[error("action does not fit the policy: {0}")]
    BadAction(String),
    #[error("batch contains no transitions")]
    EmptyBatch,
    #[error("batch has no advantages; compute them first")]
    MissingAdvantages,
    #[error("importance ratio overflows at transition {index} (log ratio {log_ratio})")]
    NonFiniteRatio { index: usize, log_ratio: f64 },
    #[error("batch is inconsistent: {0}")]
    Inconsistent(String),
    #[error("batch file, line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("batch file: {0}")]
    Io(String),
}

/// An environment observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Observation {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

fn default_log_std() -> f64 {
    0.0
}

/// Policy family and shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    TabularSoftmax {
        n_states: usize,
        n_actions: usize,
    },
    LinearGaussian {
        n_features: usize,
        action_dim: usize,
        /// Initial `log σ` for every action dimension.
        #[serde(default = "default_log_std")]
        init_log_std: f64,
    },
}

impl PolicySpec {
    pub fn tabular(n_states: usize, n_actions: usize) -> Self {
        PolicySpec::TabularSoftmax { n_states, n_actions }
    }

    pub fn linear_gaussian(n_features: usize, action_dim: usize) -> Self {
        PolicySpec::LinearGaussian {
            n_features,
            action_dim,
            init_log_std: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            PolicySpec::TabularSoftmax { n_states, n_actions } => n_states * n_actions,
            PolicySpec::LinearGaussian {
                n_features,
                action_dim,
                ..
            } => action_dim * (n_features + 1),
        }
    }

    /// Uniform softmax, or zero gain with the configured exploration noise.
    pub fn initial_theta(&self) -> ParamVector {
        match *self {
            PolicySpec::TabularSoftmax { .. } => ParamVector::zeros(self.dim()),
            PolicySpec::LinearGaussian {
                n_features,
                action_dim,
                init_log_std,
            } => {
                let mut v = vec![0.0; self.dim()];
                v[action_dim * n_features..].fill(init_log_std);
                ParamVector::from_dvector(v.into())
            }
        }
    }

    pub fn check_theta(&self, theta: &ParamVector) -> Result<(), PolicyError> {
        if theta.len() != self.dim() {
            return Err(PolicyError::DimensionMismatch {
                expected: self.dim(),
                actual: theta.len(),
            });
        }
        Ok(())
    }

    pub fn check_observation(&self, obs: &Observation) -> Result<(), PolicyError> {
        match (self, obs) {
            (PolicySpec::TabularSoftmax { n_states, .. }, Observation::Discrete(s)) if s < n_states => Ok(()),
            (PolicySpec::LinearGaussian { n_features, .. }, Observation::Continuous(x))
                if x.len() == *n_features && x.iter().all(|v| v.is_finite()) =>
            {
                Ok(())
            }
            _ => Err(PolicyError::BadObservation(format!("{obs:?} for {self:?}"))),
        }
    }

    pub fn check_action(&self, action: &Action) -> Result<(), PolicyError> {
        match (self, action) {
            (PolicySpec::TabularSoftmax { n_actions, .. }, Action::Discrete(a)) if a < n_actions => Ok(()),
            (PolicySpec::LinearGaussian { action_dim, .. }, Action::Continuous(u))
                if u.len() == *action_dim && u.iter().all(|v| v.is_finite()) =>
            {
                Ok(())
            }
            _ => Err(PolicyError::BadAction(format!("{action:?} for {self:?}"))),
        }
    }

    /// Action probabilities in state `s` of a tabular policy.
    pub fn action_probs(&self, theta: &ParamVector, s: usize) -> Vec<f64> {
        let logits = self.logits(theta, s);
        let lse = log_sum_exp(logits);
        logits.iter().map(|l| (l - lse).exp()).collect()
    }

    fn logits<'a>(&self, theta: &'a ParamVector, s: usize) -> &'a [f64] {
        let PolicySpec::TabularSoftmax { n_actions, .. } = *self else {
            panic!("logits requested from a non-tabular policy");
        };
        &theta.as_slice()[s * n_actions..(s + 1) * n_actions]
    }

    /// Mean action `Wφ` of a linear-Gaussian policy.
    pub fn gaussian_mean(&self, theta: &ParamVector, phi: &[f64]) -> Vec<f64> {
        let PolicySpec::LinearGaussian {
            n_features,
            action_dim,
            ..
        } = *self
        else {
            panic!("gaussian_mean requested from a non-Gaussian policy");
        };
        let t = theta.as_slice();
        (0..action_dim)
            .map(|j| {
                t[j * n_features..(j + 1) * n_features]
                    .iter()
                    .zip(phi)
                    .map(|(w, x)| w * x)
                    .sum()
            })
            .collect()
    }

    fn log_std<'a>(&self, theta: &'a ParamVector) -> &'a [f64] {
        let PolicySpec::LinearGaussian {
            n_features,
            action_dim,
            ..
        } = *self
        else {
            panic!("log_std requested from a non-Gaussian policy");
        };
        &theta.as_slice()[action_dim * n_features..]
    }

    /// `log π_θ(a|s)`. Observation and action must already fit the policy.
    pub fn log_prob(&self, theta: &ParamVector, obs: &Observation, action: &Action) -> f64 {
        match (self, obs, action) {
            (PolicySpec::TabularSoftmax { .. }, Observation::Discrete(s), Action::Discrete(a)) => {
                let logits = self.logits(theta, *s);
                logits[*a] - log_sum_exp(logits)
            }
            (PolicySpec::LinearGaussian { .. }, Observation::Continuous(phi), Action::Continuous(u)) => {
                let mean = self.gaussian_mean(theta, phi);
                mean.iter()
                    .zip(self.log_std(theta))
                    .zip(u)
                    .map(|((m, ls), a)| {
                        let z = (a - m) * (-ls).exp();
                        -0.5 * z * z - ls - HALF_LN_2PI
                    })
                    .sum()
            }
            _ => panic!("observation/action kinds do not match the policy family"),
        }
    }

    /// Adds `scale·∇_θ log π_θ(a|s)` into `out`.
    pub fn accumulate_grad_log_prob(
        &self,
        theta: &ParamVector,
        obs: &Observation,
        action: &Action,
        scale: f64,
        out: &mut [f64],
    ) {
        match (*self, obs, action) {
            (PolicySpec::TabularSoftmax { n_actions, .. }, Observation::Discrete(s), Action::Discrete(a)) => {
                let p = self.action_probs(theta, *s);
                let block = &mut out[s * n_actions..(s + 1) * n_actions];
                for (b, (o, pb)) in block.iter_mut().zip(&p).enumerate() {
                    let indicator = if b == *a { 1.0 } else { 0.0 };
                    *o += scale * (indicator - pb);
                }
            }
            (
                PolicySpec::LinearGaussian {
                    n_features,
                    action_dim,
                    ..
                },
                Observation::Continuous(phi),
                Action::Continuous(u),
            ) => {
                let mean = self.gaussian_mean(theta, phi);
                let log_std = self.log_std(theta);
                for j in 0..action_dim {
                    let inv_var = (-2.0 * log_std[j]).exp();
                    let r = u[j] - mean[j];
                    let row = &mut out[j * n_features..(j + 1) * n_features];
                    for (o, x) in row.iter_mut().zip(phi) {
                        *o += scale * r * inv_var * x;
                    }
                    out[action_dim * n_features + j] += scale * (r * r * inv_var - 1.0);
                }
            }
            _ => panic!("observation/action kinds do not match the policy family"),
        }
    }

    pub fn grad_log_prob(&self, theta: &ParamVector, obs: &Observation, action: &Action) -> ParamVector {
        let mut out = vec![0.0; self.dim()];
        self.accumulate_grad_log_prob(theta, obs, action, 1.0, &mut out);
        ParamVector::from_dvector(out.into())
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, theta: &ParamVector, obs: &Observation, rng: &mut R) -> Action {
        match (self, obs) {
            (PolicySpec::TabularSoftmax { .. }, Observation::Discrete(s)) => {
                let p = self.action_probs(theta, *s);
                let dist = WeightedIndex::new(&p).expect("softmax probabilities are valid weights");
                Action::Discrete(dist.sample(rng))
            }
            (PolicySpec::LinearGaussian { .. }, Observation::Continuous(phi)) => {
                let mean = self.gaussian_mean(theta, phi);
                let u = mean
                    .iter()
                    .zip(self.log_std(theta))
                    .map(|(m, ls)| {
                        let z: f64 = StandardNormal.sample(rng);
                        m + ls.exp() * z
                    })
                    .collect();
                Action::Continuous(u)
            }
            _ => panic!("observation kind does not match the policy family"),
        }
    }

    /// `KL(π_old(·|s) ‖ π(·|s))` at one state.
    pub fn kl_at(&self, theta_old: &ParamVector, theta: &ParamVector, obs: &Observation) -> f64 {
        match (self, obs) {
            (PolicySpec::TabularSoftmax { .. }, Observation::Discrete(s)) => {
                categorical_kl(self.logits(theta_old, *s), self.logits(theta, *s))
            }
            (PolicySpec::LinearGaussian { .. }, Observation::Continuous(phi)) => {
                let m0 = self.gaussian_mean(theta_old, phi);
                let m1 = self.gaussian_mean(theta, phi);
                let mean_sq: Vec<f64> = m0.iter().zip(&m1).map(|(a, b)| (a - b) * (a - b)).collect();
                gaussian_kl(self.log_std(theta_old), self.log_std(theta), &mean_sq)
            }
            _ => panic!("observation kind does not match the policy family"),
        }
    }
}

pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `Σ p_old (log p_old − log p)` from logits.
pub(crate) fn categorical_kl(logits_old: &[f64], logits: &[f64]) -> f64 {
    let lse_old = log_sum_exp(logits_old);
    let lse = log_sum_exp(logits);
    let kl: f64 = logits_old
        .iter()
        .zip(logits)
        .map(|(lo, l)| {
            let log_p_old = lo - lse_old;
            log_p_old.exp() * (log_p_old - (l - lse))
        })
        .sum();
    kl.max(0.0)
}

/// Diagonal-Gaussian KL given both log-std vectors and the per-dimension
/// squared mean difference.
pub(crate) fn gaussian_kl(log_std_old: &[f64], log_std: &[f64], mean_diff_sq: &[f64]) -> f64 {
    log_std_old
        .iter()
        .zip(log_std)
        .zip(mean_diff_sq)
        .map(|((l0, l1), dm2)| {
            let ratio = (2.0 * (l0 - l1)).exp();
            l1 - l0 + 0.5 * (ratio + dm2 * (-2.0 * l1).exp()) - 0.5
        })
        .sum::<f64>()
        .max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn tabular_probabilities_are_normalized() {
        let spec = PolicySpec::tabular(2, 3);
        let theta = pv(&[0.0, 1.0, -2.0, 700.0, 699.0, -700.0]);
        for s in 0..2 {
            let p = spec.action_probs(&theta, s);
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
        }
    }

    #[test]
    fn gaussian_log_prob_matches_density() {
        let spec = PolicySpec::linear_gaussian(2, 1);
        let theta = pv(&[0.5, -1.0, 0.3_f64.ln()]);
        let obs = Observation::Continuous(vec![2.0, 1.0]);
        let a = Action::Continuous(vec![0.4]);
        let sigma = 0.3;
        let density = (-(0.4_f64 - 0.0).powi(2) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        assert!((spec.log_prob(&theta, &obs, &a) - density.ln()).abs() < 1e-12);
    }

    #[test]
    fn grad_log_prob_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cases = [
            (PolicySpec::tabular(3, 4), Observation::Discrete(1), Action::Discrete(2)),
            (
                PolicySpec::linear_gaussian(3, 2),
                Observation::Continuous(vec![0.3, -1.2, 0.8]),
                Action::Continuous(vec![0.5, -0.1]),
            ),
        ];
        for (spec, obs, act) in cases {
            let theta = ParamVector::from_dvector((0..spec.dim()).map(|_| rng.random_range(-0.5..0.5)).collect::<Vec<_>>().into());
            let g = spec.grad_log_prob(&theta, &obs, &act);
            let h = 1e-6;
            for i in 0..spec.dim() {
                let mut p = theta.to_vec();
                let mut m = theta.to_vec();
                p[i] += h;
                m[i] -= h;
                let fd = (spec.log_prob(&pv(&p), &obs, &act) - spec.log_prob(&pv(&m), &obs, &act)) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-7 * fd.abs().max(1.0), "{i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn categorical_kl_matches_direct_sum() {
        let spec = PolicySpec::tabular(1, 2);
        let kl = spec.kl_at(&pv(&[0.0, 0.0]), &pv(&[0.0, 3.0_f64.ln()]), &Observation::Discrete(0));
        // p_old = (1/2, 1/2), p = (1/4, 3/4)
        let direct = 0.5 * (0.5_f64 / 0.25).ln() + 0.5 * (0.5_f64 / 0.75).ln();
        assert!((kl - direct).abs() <= 1e-12);
        assert_eq!(spec.kl_at(&pv(&[0.2, 0.1]), &pv(&[0.2, 0.1]), &Observation::Discrete(0)), 0.0);
    }

    #[test]
    fn gaussian_kl_mean_shift_closed_form() {
        let spec = PolicySpec::linear_gaussian(1, 2);
        let sigma: f64 = 0.7;
        let old = pv(&[0.0, 0.0, sigma.ln(), sigma.ln()]);
        let new = pv(&[0.4, -0.2, sigma.ln(), sigma.ln()]);
        let kl = spec.kl_at(&old, &new, &Observation::Continuous(vec![1.0]));
        let closed = (0.4 * 0.4 + 0.2 * 0.2) / (2.0 * sigma * sigma);
        assert!((kl - closed).abs() <= 1e-12);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let spec = PolicySpec::tabular(1, 4);
        let theta = pv(&[0.1, 0.5, -0.3, 0.0]);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| spec.sample_action(&theta, &Observation::Discrete(0), &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn spec_deserializes_with_defaults() {
        let spec: PolicySpec = serde_json::from_str(r#"{"family":"linear_gaussian","n_features":2,"action_dim":1}"#).unwrap();
        assert_eq!(spec, PolicySpec::linear_gaussian(2, 1));
        assert!(serde_json::from_str::<PolicySpec>(r#"{"family":"tabular_softmax","n_states":2,"n_actions":2,"bogus":1}"#).is_err());
    }
}
