//! Helpers shared by the policy and acceptance test targets.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use qntrpo::linalg::ParamVector;
use qntrpo::policy::{mean_kl, Episode, Observation, PolicySpec, RolloutBatch, StateStats, SurrogateObjective};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_theta(spec: &PolicySpec, scale: f64, rng: &mut ChaCha8Rng) -> ParamVector {
    ParamVector::from_dvector(DVector::from_fn(spec.dim(), |_, _| rng.random_range(-scale..scale)))
}

/// Episodes with random states and actions drawn from `π_θ`, random rewards.
pub fn synthetic_batch(spec: &PolicySpec, theta: &ParamVector, episodes: usize, len: usize, rng: &mut ChaCha8Rng) -> RolloutBatch {
    let eps = (0..episodes)
        .map(|_| {
            let mut ep = Episode::default();
            for _ in 0..len {
                let obs = match *spec {
                    PolicySpec::TabularSoftmax { n_states, .. } => Observation::Discrete(rng.random_range(0..n_states)),
                    PolicySpec::LinearGaussian { n_features, .. } => {
                        Observation::Continuous((0..n_features).map(|_| rng.random_range(-1.0..1.0)).collect())
                    }
                };
                let act = spec.sample_action(theta, &obs, rng);
                ep.log_probs.push(spec.log_prob(theta, &obs, &act));
                ep.observations.push(obs);
                ep.actions.push(act);
                ep.rewards.push(rng.random_range(-1.0..1.0));
                ep.values.push(rng.random_range(-0.5..0.5));
            }
            ep
        })
        .collect();
    let mut batch = RolloutBatch::new(eps, 0.99, 0.97).unwrap();
    batch.compute_advantages(true).unwrap();
    batch
}

pub fn fd_gradient(obj: &SurrogateObjective, theta: &ParamVector, h: f64) -> DVector<f64> {
    DVector::from_fn(theta.len(), |i, _| {
        let mut p = theta.to_vec();
        let mut m = theta.to_vec();
        p[i] += h;
        m[i] -= h;
        let fp = obj.evaluate(&ParamVector::new(p).unwrap()).unwrap().0;
        let fm = obj.evaluate(&ParamVector::new(m).unwrap()).unwrap().0;
        (fp - fm) / (2.0 * h)
    })
}

/// Dense Hessian of `θ ↦ mean_kl(θ_old, θ)` at `θ_old` by second differences.
pub fn fd_kl_hessian(spec: &PolicySpec, theta_old: &ParamVector, stats: &StateStats, h: f64) -> DMatrix<f64> {
    let d = spec.dim();
    let kl = |i: usize, si: f64, j: usize, sj: f64| {
        let mut t = theta_old.to_vec();
        t[i] += si * h;
        t[j] += sj * h;
        mean_kl(spec, theta_old, &ParamVector::new(t).unwrap(), stats)
    };
    DMatrix::from_fn(d, d, |i, j| {
        (kl(i, 1.0, j, 1.0) - kl(i, 1.0, j, -1.0) - kl(i, -1.0, j, 1.0) + kl(i, -1.0, j, -1.0)) / (4.0 * h * h)
    })
}

pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}
