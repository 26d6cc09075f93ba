use std::io::{Read, Write};

use super::{Action, Observation, PolicyError, PolicySpec};

/// Columns of the batch text format, one row per transition.
///
/// Discrete observations and actions are written as integers, continuous ones
/// as `[x1;x2;…]`. `advantage` is empty when advantages have not been
/// computed. `gamma`, `lambda` and `normalized` repeat on every row.
pub const BATCH_CSV_HEADER: [&str; 11] = [
    "episode",
    "t",
    "observation",
    "action",
    "reward",
    "value",
    "log_prob",
    "advantage",
    "gamma",
    "lambda",
    "normalized",
];

/// One trajectory. `values[t]` is the critic's `V(s_t)` and `log_probs[t]` is
/// `log π_θold(a_t|s_t)` under the sampling policy. The value after the last
/// step is taken to be zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Episode {
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
    }

    fn check(&self) -> Result<(), PolicyError> {
        let n = self.rewards.len();
        if self.observations.len() != n || self.actions.len() != n || self.values.len() != n || self.log_probs.len() != n {
            return Err(PolicyError::Inconsistent("episode columns have different lengths".into()));
        }
        if let Some(t) = self.log_probs.iter().position(|l| !l.is_finite()) {
            return Err(PolicyError::Inconsistent(format!("non-finite log-probability at step {t}")));
        }
        if self.rewards.iter().chain(&self.values).any(|v| !v.is_finite()) {
            return Err(PolicyError::Inconsistent("non-finite reward or value".into()));
        }
        Ok(())
    }
}

/// Generalized advantage estimates for one trajectory:
/// `A_t = Σ_{l≥0} (γλ)^l δ_{t+l}` with `δ_t = r_t + γV(s_{t+1}) − V(s_t)` and
/// `V(s_T) = 0`.
pub fn gae_advantages(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    assert_eq!(rewards.len(), values.len(), "rewards and values must align");
    let mut out = vec![0.0; rewards.len()];
    let mut next_value = 0.0;
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        let td = rewards[t] + gamma * next_value - values[t];
        acc = td + gamma * lambda * acc;
        out[t] = acc;
        next_value = values[t];
    }
    out
}

/// Trajectories sampled under `θ_old`, with per-step advantages once computed.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    episodes: Vec<Episode>,
    gamma: f64,
    lambda: f64,
    advantages: Option<Vec<f64>>,
    normalized: bool,
}

impl RolloutBatch {
    pub fn new(episodes: Vec<Episode>, gamma: f64, lambda: f64) -> Result<Self, PolicyError> {
        if !(gamma > 0.0 && gamma <= 1.0) || !(lambda >= 0.0 && lambda <= 1.0) {
            return Err(PolicyError::Inconsistent(format!(
                "need gamma in (0, 1] and lambda in [0, 1], got {gamma} and {lambda}"
            )));
        }
        for ep in &episodes {
            ep.check()?;
        }
        Ok(Self {
            episodes,
            gamma,
            lambda,
            advantages: None,
            normalized: false,
        })
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn num_steps(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    /// Mean over episodes of `Σ_{t<T} γ^t`, the total mass of the
    /// unnormalized discounted state-visitation frequencies.
    pub fn visitation_mass(&self) -> f64 {
        let g = self.gamma;
        let total: f64 = self
            .episodes
            .iter()
            .map(|e| (0..e.len()).fold((0.0, 1.0), |(acc, p), _| (acc + p, p * g)).0)
            .sum();
        total / self.episodes.len() as f64
    }

    pub fn advantages(&self) -> Option<&[f64]> {
        self.advantages.as_deref()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Mean discounted return per episode.
    pub fn mean_return(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(|e| e.discounted_return(self.gamma)).sum::<f64>() / self.episodes.len() as f64
    }

    /// Checks every observation and action against the policy.
    pub fn check_policy(&self, policy: &PolicySpec) -> Result<(), PolicyError> {
        for ep in &self.episodes {
            for (o, a) in ep.observations.iter().zip(&ep.actions) {
                policy.check_observation(o)?;
                policy.check_action(a)?;
            }
        }
        Ok(())
    }

    /// Flat `(observation, action, log π_old)` triples in episode order.
    pub fn transitions(&self) -> impl Iterator<Item = (&Observation, &Action, f64)> {
        self.episodes.iter().flat_map(|e| {
            e.observations
                .iter()
                .zip(&e.actions)
                .zip(&e.log_probs)
                .map(|((o, a), l)| (o, a, *l))
        })
    }

    pub fn observations(&self) -> impl Iterator<Item = &Observation> {
        self.episodes.iter().flat_map(|e| e.observations.iter())
    }

    /// Replaces the critic values; previously computed advantages are dropped.
    pub fn set_values<F: FnMut(&Observation) -> f64>(&mut self, mut value: F) {
        for ep in &mut self.episodes {
            ep.values = ep.observations.iter().map(&mut value).collect();
        }
        self.advantages = None;
        self.normalized = false;
    }

    /// Fills advantages by GAE and, if `normalize`, rescales them to zero mean
    /// and unit (population) standard deviation. When the spread is negligible
    /// the advantages are only centered and the batch is not marked normalized.
    pub fn compute_advantages(&mut self, normalize: bool) -> Result<(), PolicyError> {
        if self.num_steps() == 0 {
            return Err(PolicyError::EmptyBatch);
        }
        let mut adv = Vec::with_capacity(self.num_steps());
        for ep in &self.episodes {
            adv.extend(gae_advantages(&ep.rewards, &ep.values, self.gamma, self.lambda));
        }
        self.normalized = false;
        if normalize {
            let n = adv.len() as f64;
            let mean = adv.iter().sum::<f64>() / n;
            adv.iter_mut().for_each(|a| *a -= mean);
            let std = (adv.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
            if std > 1e-12 {
                adv.iter_mut().for_each(|a| *a /= std);
                self.normalized = true;
            }
        }
        self.advantages = Some(adv);
        Ok(())
    }

    /// Installs externally computed per-step advantages, e.g. exact ones from
    /// a known model.
    pub fn set_advantages(&mut self, advantages: Vec<f64>, normalized: bool) -> Result<(), PolicyError> {
        if advantages.len() != self.num_steps() {
            return Err(PolicyError::Inconsistent(format!(
                "{} advantages for {} steps",
                advantages.len(),
                self.num_steps()
            )));
        }
        if advantages.iter().any(|a| !a.is_finite()) {
            return Err(PolicyError::Inconsistent("non-finite advantage".into()));
        }
        self.advantages = Some(advantages);
        self.normalized = normalized;
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), PolicyError> {
        let io = |e: csv::Error| PolicyError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(BATCH_CSV_HEADER).map_err(io)?;
        let mut idx = 0;
        for (e, ep) in self.episodes.iter().enumerate() {
            for t in 0..ep.len() {
                let adv = self.advantages.as_ref().map(|a| format!("{:?}", a[idx])).unwrap_or_default();
                idx += 1;
                w.write_record([
                    e.to_string(),
                    t.to_string(),
                    encode_observation(&ep.observations[t]),
                    encode_action(&ep.actions[t]),
                    format!("{:?}", ep.rewards[t]),
                    format!("{:?}", ep.values[t]),
                    format!("{:?}", ep.log_probs[t]),
                    adv,
                    format!("{:?}", self.gamma),
                    format!("{:?}", self.lambda),
                    self.normalized.to_string(),
                ])
                .map_err(io)?;
            }
        }
        w.flush().map_err(|e| PolicyError::Io(e.to_string()))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, PolicyError> {
        let mut reader = csv::Reader::from_reader(input);
        let headers = reader.headers().map_err(|e| PolicyError::Io(e.to_string()))?.clone();
        if headers.iter().ne(BATCH_CSV_HEADER) {
            return Err(PolicyError::Parse {
                line: 1,
                message: format!("expected header {}", BATCH_CSV_HEADER.join(",")),
            });
        }
        let mut episodes: Vec<Episode> = Vec::new();
        let mut advantages = Vec::new();
        let mut any_missing = false;
        let mut meta: Option<(f64, f64, bool)> = None;
        for (i, record) in reader.records().enumerate() {
            let line = i + 2;
            let rec = record.map_err(|e| PolicyError::Parse {
                line,
                message: e.to_string(),
            })?;
            let perr = |message: String| PolicyError::Parse { line, message };
            let num = |k: usize| -> Result<f64, PolicyError> {
                rec[k]
                    .parse::<f64>()
                    .map_err(|e| perr(format!("column {}: {e}", BATCH_CSV_HEADER[k])))
            };
            let int = |k: usize| -> Result<usize, PolicyError> {
                rec[k]
                    .parse::<usize>()
                    .map_err(|e| perr(format!("column {}: {e}", BATCH_CSV_HEADER[k])))
            };
            let (e, t) = (int(0)?, int(1)?);
            if e == episodes.len() && t == 0 {
                episodes.push(Episode::default());
            } else if e + 1 != episodes.len() || t != episodes[e].len() {
                return Err(perr(format!("rows out of order at episode {e}, step {t}")));
            }
            let row_meta = (num(8)?, num(9)?, rec[10] == *"true");
            if *meta.get_or_insert(row_meta) != row_meta {
                return Err(perr("gamma, lambda or normalized changes between rows".into()));
            }
            let ep = &mut episodes[e];
            ep.observations.push(decode_observation(&rec[2]).map_err(&perr)?);
            ep.actions.push(decode_action(&rec[3]).map_err(&perr)?);
            ep.rewards.push(num(4)?);
            ep.values.push(num(5)?);
            ep.log_probs.push(num(6)?);
            if rec[7].is_empty() {
                any_missing = true;
            } else {
                advantages.push(num(7)?);
            }
        }
        let (gamma, lambda, normalized) = meta.ok_or(PolicyError::EmptyBatch)?;
        let mut batch = RolloutBatch::new(episodes, gamma, lambda)?;
        if !any_missing {
            batch.set_advantages(advantages, normalized)?;
        } else if !advantages.is_empty() {
            return Err(PolicyError::Inconsistent("advantage column is partially filled".into()));
        }
        Ok(batch)
    }
}

fn encode_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
    format!("[{}]", parts.join(";"))
}

fn decode_vec(s: &str) -> Result<Option<Vec<f64>>, String> {
    let Some(inner) = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')) else {
        return Ok(None);
    };
    if inner.is_empty() {
        return Ok(Some(Vec::new()));
    }
    inner
        .split(';')
        .map(|p| p.parse::<f64>().map_err(|e| format!("bad vector entry {p:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
}

fn encode_observation(o: &Observation) -> String {
    match o {
        Observation::Discrete(s) => s.to_string(),
        Observation::Continuous(x) => encode_vec(x),
    }
}

fn encode_action(a: &Action) -> String {
    match a {
        Action::Discrete(s) => s.to_string(),
        Action::Continuous(x) => encode_vec(x),
    }
}

fn decode_observation(s: &str) -> Result<Observation, String> {
    match decode_vec(s)? {
        Some(v) => Ok(Observation::Continuous(v)),
        None => s
            .parse()
            .map(Observation::Discrete)
            .map_err(|e| format!("bad observation {s:?}: {e}")),
    }
}

fn decode_action(s: &str) -> Result<Action, String> {
    match decode_vec(s)? {
        Some(v) => Ok(Action::Continuous(v)),
        None => s
            .parse()
            .map(Action::Discrete)
            .map_err(|e| format!("bad action {s:?}: {e}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
        let n = rewards.len();
        let v = |t: usize| if t < n { values[t] } else { 0.0 };
        let td: Vec<f64> = (0..n).map(|t| rewards[t] + gamma * v(t + 1) - v(t)).collect();
        (0..n)
            .map(|t| (t..n).map(|k| (gamma * lambda).powi((k - t) as i32) * td[k]).sum())
            .collect()
    }

    #[test]
    fn undiscounted_return_to_go() {
        assert_eq!(gae_advantages(&[1.0, 1.0], &[0.0, 0.0], 1.0, 1.0), vec![2.0, 1.0]);
    }

    #[test]
    fn lambda_zero_gives_td_residuals() {
        let r = [0.5, -1.0, 2.0];
        let v = [0.1, 0.7, -0.3];
        let a = gae_advantages(&r, &v, 0.9, 0.0);
        assert_eq!(a, vec![0.5 + 0.9 * 0.7 - 0.1, -1.0 + 0.9 * -0.3 - 0.7, 2.0 - -0.3]);
    }

    #[test]
    fn matches_brute_force_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let r: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = gae_advantages(&r, &v, 0.99, 0.97);
            let b = brute_force(&r, &v, 0.99, 0.97);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    fn episode(len: usize, rng: &mut ChaCha8Rng) -> Episode {
        Episode {
            observations: (0..len).map(|_| Observation::Discrete(rng.random_range(0..3))).collect(),
            actions: (0..len).map(|_| Action::Discrete(rng.random_range(0..2))).collect(),
            rewards: (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            values: (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            log_probs: vec![0.5_f64.ln(); len],
        }
    }

    #[test]
    fn normalization_centers_and_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps = (0..4).map(|_| episode(7, &mut rng)).collect();
        let mut batch = RolloutBatch::new(eps, 0.99, 0.97).unwrap();
        batch.compute_advantages(true).unwrap();
        assert!(batch.is_normalized());
        let a = batch.advantages().unwrap();
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() <= 1e-10);
        assert!((std - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn constant_advantages_are_not_marked_normalized() {
        let ep = Episode {
            observations: vec![Observation::Discrete(0); 3],
            actions: vec![Action::Discrete(0); 3],
            rewards: vec![0.0; 3],
            values: vec![0.0; 3],
            log_probs: vec![0.0; 3],
        };
        let mut batch = RolloutBatch::new(vec![ep], 0.99, 0.97).unwrap();
        batch.compute_advantages(true).unwrap();
        assert!(!batch.is_normalized());
        assert_eq!(batch.advantages().unwrap(), &[0.0; 3]);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let mut batch = RolloutBatch::new(vec![], 0.99, 0.97).unwrap();
        assert_eq!(batch.compute_advantages(true), Err(PolicyError::EmptyBatch));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut eps: Vec<Episode> = (0..3).map(|_| episode(5, &mut rng)).collect();
        eps.push(Episode {
            observations: vec![Observation::Continuous(vec![0.1, -2.5e-7])],
            actions: vec![Action::Continuous(vec![1.0 / 3.0])],
            rewards: vec![0.25],
            values: vec![0.0],
            log_probs: vec![-1.234],
        });
        let mut batch = RolloutBatch::new(eps, 0.99, 0.97).unwrap();
        let mut buf = Vec::new();
        batch.write_csv(&mut buf).unwrap();
        assert_eq!(RolloutBatch::read_csv(buf.as_slice()).unwrap(), batch);
        batch.compute_advantages(true).unwrap();
        let mut buf = Vec::new();
        batch.write_csv(&mut buf).unwrap();
        assert_eq!(RolloutBatch::read_csv(buf.as_slice()).unwrap(), batch);
    }

    #[test]
    fn csv_rejects_out_of_order_rows() {
        let text = "episode,t,observation,action,reward,value,log_prob,advantage,gamma,lambda,normalized\n\
                    0,1,0,0,1.0,0.0,-0.5,,0.99,0.97,false\n";
        assert!(matches!(RolloutBatch::read_csv(text.as_bytes()), Err(PolicyError::Parse { line: 2, .. })));
    }
}
