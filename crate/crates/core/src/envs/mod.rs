//! Small environments whose optimal performance can be computed exactly, and
//! trajectory sampling under a policy.

mod lqg;
mod tabular;

pub use lqg::{LqgEnv, RiccatiSolution};
pub use tabular::{PolicyValues, TabularMdp};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::ParamVector;
use crate::policy::{Action, Episode, Observation, PolicySpec, RolloutBatch};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid environment model: {0}")]
    InvalidModel(String),
    #[error("policy evaluation system is singular")]
    SingularSystem,
    #[error("policy does not fit the environment: {0}")]
    IncompatiblePolicy(String),
}

/// Generator for the batch of training episode `episode` of a run seeded with
/// `seed`: one ChaCha stream per episode.
pub fn batch_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub enum Env {
    Tabular(TabularMdp),
    Lqg(LqgEnv),
}

impl Env {
    pub fn gamma(&self) -> f64 {
        match self {
            Env::Tabular(m) => m.gamma,
            Env::Lqg(l) => l.gamma,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Env::Tabular(m) => m.horizon,
            Env::Lqg(l) => l.horizon,
        }
    }

    /// Uniform softmax for tabular models, zero-gain linear Gaussian for LQG.
    pub fn default_policy(&self) -> PolicySpec {
        match self {
            Env::Tabular(m) => PolicySpec::tabular(m.n_states(), m.n_actions()),
            Env::Lqg(l) => PolicySpec::linear_gaussian(l.state_dim(), l.action_dim()),
        }
    }

    pub fn check_policy(&self, policy: &PolicySpec) -> Result<(), EnvError> {
        let ok = match (self, *policy) {
            (Env::Tabular(m), PolicySpec::TabularSoftmax { n_states, n_actions }) => {
                n_states == m.n_states() && n_actions == m.n_actions()
            }
            (
                Env::Lqg(l),
                PolicySpec::LinearGaussian {
                    n_features,
                    action_dim,
                    ..
                },
            ) => n_features == l.state_dim() && action_dim == l.action_dim(),
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(EnvError::IncompatiblePolicy(format!("{policy:?}")))
        }
    }

    /// Runs one episode of at most `horizon` steps. Critic values are left at
    /// zero.
    pub fn sample_episode<R: Rng + ?Sized>(&self, policy: &PolicySpec, theta: &ParamVector, rng: &mut R) -> Episode {
        let mut ep = Episode::default();
        match self {
            Env::Tabular(m) => {
                let mut s = m.sample_start(rng);
                if m.is_terminal(s) {
                    return ep;
                }
                for _ in 0..m.horizon {
                    let obs = Observation::Discrete(s);
                    let action = policy.sample_action(theta, &obs, rng);
                    let Action::Discrete(a) = action else { unreachable!() };
                    let next = m.sample_next(s, a, rng);
                    ep.log_probs.push(policy.log_prob(theta, &obs, &action));
                    ep.rewards.push(m.reward(s, a));
                    ep.observations.push(obs);
                    ep.actions.push(action);
                    if m.is_terminal(next) {
                        break;
                    }
                    s = next;
                }
            }
            Env::Lqg(l) => {
                let mut x = l.sample_start(rng);
                for _ in 0..l.horizon {
                    let obs = Observation::Continuous(x.iter().copied().collect());
                    let action = policy.sample_action(theta, &obs, rng);
                    let Action::Continuous(u) = &action else { unreachable!() };
                    let (cost, next) = l.step(&x, &DVector::from_column_slice(u), rng);
                    ep.log_probs.push(policy.log_prob(theta, &obs, &action));
                    ep.rewards.push(-cost);
                    ep.observations.push(obs);
                    ep.actions.push(action);
                    x = next;
                }
            }
        }
        ep.values = vec![0.0; ep.rewards.len()];
        ep
    }

    /// Whole episodes until at least `min_steps` transitions are collected.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        policy: &PolicySpec,
        theta: &ParamVector,
        min_steps: usize,
        lambda: f64,
        rng: &mut R,
    ) -> Result<RolloutBatch, EnvError> {
        self.check_policy(policy)?;
        let mut episodes = Vec::new();
        let mut steps = 0;
        while steps < min_steps.max(1) {
            let ep = self.sample_episode(policy, theta, rng);
            if ep.is_empty() {
                continue;
            }
            steps += ep.len();
            episodes.push(ep);
        }
        RolloutBatch::new(episodes, self.gamma(), lambda).map_err(|e| EnvError::InvalidModel(e.to_string()))
    }

    /// Exact expected discounted return `η` of the policy, where the model
    /// permits it.
    pub fn exact_return(&self, policy: &PolicySpec, theta: &ParamVector) -> Result<f64, EnvError> {
        self.check_policy(policy)?;
        match self {
            Env::Tabular(m) => m.policy_evaluation(&policy_table(policy, theta)).map(|pv| pv.eta),
            Env::Lqg(l) => {
                let (n, k) = (l.state_dim(), l.action_dim());
                let t = theta.as_slice();
                let gain = DMatrix::from_row_slice(k, n, &t[..k * n]);
                Ok(-l.linear_policy_cost(&gain, &t[k * n..]))
            }
        }
    }

    /// Best achievable `η`: value iteration for tabular models, the Riccati
    /// cost for LQG.
    pub fn optimal_return(&self) -> f64 {
        match self {
            Env::Tabular(m) => m.value_iteration(1e-12).1,
            Env::Lqg(l) => -l.riccati().cost,
        }
    }
}

/// `π(a|s)` as a flat table `s·n_a + a` for a tabular softmax policy.
pub fn policy_table(policy: &PolicySpec, theta: &ParamVector) -> Vec<f64> {
    let PolicySpec::TabularSoftmax { n_states, .. } = *policy else {
        panic!("policy_table needs a tabular policy");
    };
    (0..n_states).flat_map(|s| policy.action_probs(theta, s)).collect()
}

fn default_size() -> usize {
    5
}
fn default_slip() -> f64 {
    0.1
}
fn default_goal_reward() -> f64 {
    1.0
}
fn default_gamma() -> f64 {
    0.99
}
fn default_horizon() -> usize {
    100
}

/// Environment definition as read from a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    Gridworld {
        #[serde(default = "default_size")]
        size: usize,
        #[serde(default = "default_slip")]
        slip: f64,
        #[serde(default = "default_goal_reward")]
        goal_reward: f64,
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default = "default_horizon")]
        horizon: usize,
    },
    /// Explicit model: `transitions[s][a][s']`, `rewards[s][a]`.
    Tabular {
        transitions: Vec<Vec<Vec<f64>>>,
        rewards: Vec<Vec<f64>>,
        rho0: Vec<f64>,
        #[serde(default)]
        terminal: Vec<usize>,
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default = "default_horizon")]
        horizon: usize,
    },
    /// Matrices given as lists of rows.
    Lqg {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
        r: Vec<Vec<f64>>,
        noise_cov: Vec<Vec<f64>>,
        init_cov: Vec<Vec<f64>>,
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default = "default_horizon")]
        horizon: usize,
    },
    DoubleIntegrator {
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default = "default_horizon")]
        horizon: usize,
    },
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::Gridworld {
            size: default_size(),
            slip: default_slip(),
            goal_reward: default_goal_reward(),
            gamma: default_gamma(),
            horizon: default_horizon(),
        }
    }
}

impl EnvSpec {
    pub fn build(&self) -> Result<Env, EnvError> {
        match self {
            EnvSpec::Gridworld {
                size,
                slip,
                goal_reward,
                gamma,
                horizon,
            } => TabularMdp::gridworld(*size, *slip, *goal_reward, *gamma, *horizon).map(Env::Tabular),
            EnvSpec::Tabular {
                transitions,
                rewards,
                rho0,
                terminal,
                gamma,
                horizon,
            } => {
                let ns = transitions.len();
                let na = transitions.first().map_or(0, Vec::len);
                let shape_ok = transitions.iter().all(|row| row.len() == na && row.iter().all(|p| p.len() == ns))
                    && rewards.len() == ns
                    && rewards.iter().all(|r| r.len() == na);
                if !shape_ok {
                    return Err(EnvError::InvalidModel(
                        "transitions must be [states][actions][states] and rewards [states][actions]".into(),
                    ));
                }
                let mut term = vec![false; ns];
                for &s in terminal {
                    *term
                        .get_mut(s)
                        .ok_or_else(|| EnvError::InvalidModel(format!("terminal state {s} out of range")))? = true;
                }
                TabularMdp::new(
                    ns,
                    na,
                    transitions.iter().flatten().flatten().copied().collect(),
                    rewards.iter().flatten().copied().collect(),
                    rho0.clone(),
                    term,
                    *gamma,
                    *horizon,
                )
                .map(Env::Tabular)
            }
            EnvSpec::Lqg {
                a,
                b,
                q,
                r,
                noise_cov,
                init_cov,
                gamma,
                horizon,
            } => LqgEnv::new(
                rows(a, "a")?,
                rows(b, "b")?,
                rows(q, "q")?,
                rows(r, "r")?,
                rows(noise_cov, "noise_cov")?,
                rows(init_cov, "init_cov")?,
                *gamma,
                *horizon,
            )
            .map(Env::Lqg),
            EnvSpec::DoubleIntegrator { gamma, horizon } => {
                if !(*gamma > 0.0 && *gamma <= 1.0) || *horizon == 0 {
                    return Err(EnvError::InvalidModel("need gamma in (0, 1] and a positive horizon".into()));
                }
                Ok(Env::Lqg(LqgEnv::double_integrator(*gamma, *horizon)))
            }
        }
    }
}

fn rows(m: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>, EnvError> {
    let ncols = m.first().map_or(0, Vec::len);
    if m.is_empty() || m.iter().any(|r| r.len() != ncols) {
        return Err(EnvError::InvalidModel(format!("matrix {name} must be a non-empty list of equal-length rows")));
    }
    Ok(DMatrix::from_row_iterator(m.len(), ncols, m.iter().flatten().copied()))
}
