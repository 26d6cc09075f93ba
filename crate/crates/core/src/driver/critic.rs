use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::envs::{policy_table, Env};
use crate::linalg::ParamVector;
use crate::policy::{Observation, PolicySpec, RolloutBatch};

use super::DriverError;

/// Source of the state values `V(s)` used by advantage estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CriticKind {
    /// `exact` for tabular models, `fitted` otherwise.
    #[default]
    Auto,
    /// Exact `V_π` by solving the Bellman equation of the known model.
    Exact,
    /// Least-squares fit of discounted returns-to-go on the batch.
    Fitted,
    /// `V ≡ 0`.
    Zero,
}

impl CriticKind {
    pub fn resolve(self, env: &Env) -> CriticKind {
        match (self, env) {
            (CriticKind::Auto, Env::Tabular(_)) => CriticKind::Exact,
            (CriticKind::Auto, Env::Lqg(_)) => CriticKind::Fitted,
            (k, _) => k,
        }
    }
}

/// Fills `batch` values according to `kind` (already resolved).
pub fn assign_values(
    kind: CriticKind,
    env: &Env,
    policy: &PolicySpec,
    theta: &ParamVector,
    batch: &mut RolloutBatch,
) -> Result<(), DriverError> {
    match kind {
        CriticKind::Zero => batch.set_values(|_| 0.0),
        CriticKind::Exact => {
            let Env::Tabular(mdp) = env else {
                return Err(DriverError::Config("the exact critic needs a tabular environment".into()));
            };
            let v = mdp.policy_evaluation(&policy_table(policy, theta))?.v;
            batch.set_values(|o| match o {
                Observation::Discrete(s) => v[*s],
                Observation::Continuous(_) => unreachable!("tabular batches have discrete observations"),
            });
        }
        CriticKind::Fitted | CriticKind::Auto => {
            let w = fit_returns(batch);
            batch.set_values(|o| predict(o, &w));
        }
    }
    Ok(())
}

/// One-hot encoding for discrete states; `[1, x, upper(xxᵀ)]` for continuous
/// ones.
fn features(obs: &Observation) -> DVector<f64> {
    match obs {
        Observation::Discrete(s) => {
            let mut f = DVector::zeros(s + 1);
            f[*s] = 1.0;
            f
        }
        Observation::Continuous(x) => {
            let n = x.len();
            let mut f = Vec::with_capacity(1 + n + n * (n + 1) / 2);
            f.push(1.0);
            f.extend_from_slice(x);
            for i in 0..n {
                for j in i..n {
                    f.push(x[i] * x[j]);
                }
            }
            DVector::from_vec(f)
        }
    }
}

fn predict(obs: &Observation, w: &DVector<f64>) -> f64 {
    let f = features(obs);
    if f.len() > w.len() {
        // A state index never seen in the batch.
        return 0.0;
    }
    f.resize_vertically(w.len(), 0.0).dot(w)
}

/// Ridge-regularized least squares of returns-to-go on [`features`].
fn fit_returns(batch: &RolloutBatch) -> DVector<f64> {
    let gamma = batch.gamma();
    let mut rows: Vec<DVector<f64>> = Vec::with_capacity(batch.num_steps());
    let mut targets = Vec::with_capacity(batch.num_steps());
    for ep in batch.episodes() {
        let mut acc = 0.0;
        let mut rtg = vec![0.0; ep.len()];
        for t in (0..ep.len()).rev() {
            acc = ep.rewards[t] + gamma * acc;
            rtg[t] = acc;
        }
        rows.extend(ep.observations.iter().map(features));
        targets.extend(rtg);
    }
    let k = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    for (r, y) in rows.iter().zip(&targets) {
        let r = r.clone().resize_vertically(k, 0.0);
        gram.ger(1.0, &r, &r, 1.0);
        rhs.axpy(*y, &r, 1.0);
    }
    let ridge = 1e-8 * (gram.trace() / k.max(1) as f64).max(1.0);
    for i in 0..k {
        gram[(i, i)] += ridge;
    }
    gram.cholesky().map(|c| c.solve(&rhs)).unwrap_or_else(|| DVector::zeros(k))
}
