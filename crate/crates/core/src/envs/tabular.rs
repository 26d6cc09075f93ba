use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::EnvError;

/// A finite MDP with known model.
///
/// `transition[(s·n_a + a)·n_s + s']` is `P(s'|s,a)` and `reward[s·n_a + a]`
/// is `r(s,a)`. Entering a terminal state ends an episode; terminal states
/// have value zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    rho0: Vec<f64>,
    terminal: Vec<bool>,
    pub gamma: f64,
    pub horizon: usize,
}

/// Exact values of a fixed policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyValues {
    pub v: Vec<f64>,
    /// `Q(s,a)` at index `s·n_a + a`.
    pub q: Vec<f64>,
    /// `ρ₀ᵀV`.
    pub eta: f64,
}

impl PolicyValues {
    pub fn advantage(&self, n_actions: usize, s: usize, a: usize) -> f64 {
        self.q[s * n_actions + a] - self.v[s]
    }
}

impl TabularMdp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        rho0: Vec<f64>,
        terminal: Vec<bool>,
        gamma: f64,
        horizon: usize,
    ) -> Result<Self, EnvError> {
        let bad = |m: String| Err(EnvError::InvalidModel(m));
        if n_states == 0 || n_actions == 0 {
            return bad("need at least one state and one action".into());
        }
        if transition.len() != n_states * n_actions * n_states {
            return bad(format!("transition table has {} entries", transition.len()));
        }
        if reward.len() != n_states * n_actions || rho0.len() != n_states || terminal.len() != n_states {
            return bad("reward, rho0 or terminal table has the wrong size".into());
        }
        for (row, p) in transition.chunks(n_states).enumerate() {
            if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return bad(format!(
                    "P(·|s={}, a={}) is not a probability vector",
                    row / n_actions,
                    row % n_actions
                ));
            }
        }
        if rho0.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (rho0.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return bad("rho0 is not a probability vector".into());
        }
        if rho0.iter().zip(&terminal).all(|(p, t)| *t || *p == 0.0) {
            return bad("rho0 puts no mass on non-terminal states".into());
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return bad("rewards must be finite".into());
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return bad(format!("gamma = {gamma} must lie in (0, 1]"));
        }
        if horizon == 0 {
            return bad("horizon must be positive".into());
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            rho0,
            terminal,
            gamma,
            horizon,
        })
    }

    /// `size × size` grid plus one absorbing sink state.
    ///
    /// Actions are up, right, down, left. With probability `slip` the move
    /// goes in a uniformly random direction instead; moves into a wall stay
    /// put. Any action in the bottom-right goal cell earns `goal_reward` and
    /// leads to the terminal sink. Episodes start in the top-left cell.
    pub fn gridworld(size: usize, slip: f64, goal_reward: f64, gamma: f64, horizon: usize) -> Result<Self, EnvError> {
        if size < 2 {
            return Err(EnvError::InvalidModel("gridworld needs size ≥ 2".into()));
        }
        if !(0.0..=1.0).contains(&slip) {
            return Err(EnvError::InvalidModel(format!("slip = {slip} must lie in [0, 1]")));
        }
        let cells = size * size;
        let n_states = cells + 1;
        let sink = cells;
        let goal = cells - 1;
        let n_actions = 4;
        let mut transition = vec![0.0; n_states * n_actions * n_states];
        let mut reward = vec![0.0; n_states * n_actions];
        let moved = |cell: usize, dir: usize| -> usize {
            let (r, c) = (cell / size, cell % size);
            match dir {
                0 if r > 0 => cell - size,
                1 if c + 1 < size => cell + 1,
                2 if r + 1 < size => cell + size,
                3 if c > 0 => cell - 1,
                _ => cell,
            }
        };
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &mut transition[(s * n_actions + a) * n_states..(s * n_actions + a + 1) * n_states];
                if s == sink || s == goal {
                    row[sink] = 1.0;
                    if s == goal {
                        reward[s * n_actions + a] = goal_reward;
                    }
                    continue;
                }
                for dir in 0..4 {
                    let p = slip / 4.0 + if dir == a { 1.0 - slip } else { 0.0 };
                    row[moved(s, dir)] += p;
                }
            }
        }
        let mut rho0 = vec![0.0; n_states];
        rho0[0] = 1.0;
        let mut terminal = vec![false; n_states];
        terminal[sink] = true;
        Self::new(n_states, n_actions, transition, reward, rho0, terminal, gamma, horizon)
    }

    /// Random dense MDP for testing, with Dirichlet-like rows and rewards in
    /// `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, gamma: f64, horizon: usize, rng: &mut R) -> Self {
        let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            let w: Vec<f64> = (0..n_states).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
            let total: f64 = w.iter().sum();
            let mut row: Vec<f64> = w.iter().map(|x| x / total).collect();
            let drift = 1.0 - row.iter().sum::<f64>();
            row[0] += drift;
            transition.extend(row);
        }
        let reward = (0..n_states * n_actions).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut rho0 = vec![0.0; n_states];
        rho0[0] = 1.0;
        Self::new(
            n_states,
            n_actions,
            transition,
            reward,
            rho0,
            vec![false; n_states],
            gamma,
            horizon,
        )
        .expect("random model is valid")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn transition(&self, s: usize, a: usize) -> &[f64] {
        let i = (s * self.n_actions + a) * self.n_states;
        &self.transition[i..i + self.n_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn rho0(&self) -> &[f64] {
        &self.rho0
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub(crate) fn sample_start<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.rho0, rng)
    }

    pub(crate) fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        sample_index(self.transition(s, a), rng)
    }

    fn backup(&self, v: &[f64], s: usize, a: usize) -> f64 {
        let next: f64 = self.transition(s, a).iter().zip(v).map(|(p, x)| p * x).sum();
        self.reward(s, a) + self.gamma * next
    }

    fn bellman_optimal(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n_states)
            .map(|s| {
                if self.terminal[s] {
                    0.0
                } else {
                    (0..self.n_actions).map(|a| self.backup(v, s, a)).fold(f64::NEG_INFINITY, f64::max)
                }
            })
            .collect()
    }

    /// Optimal values and `η* = ρ₀ᵀV*`.
    ///
    /// For `γ < 1` iterates until the Bellman residual is at most `tol`. For
    /// `γ = 1` returns the optimal value of the first `horizon` steps.
    pub fn value_iteration(&self, tol: f64) -> (Vec<f64>, f64) {
        let mut v = vec![0.0; self.n_states];
        if self.gamma >= 1.0 {
            for _ in 0..self.horizon {
                v = self.bellman_optimal(&v);
            }
        } else {
            loop {
                let next = self.bellman_optimal(&v);
                let residual = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                v = next;
                if residual <= tol * (1.0 - self.gamma) || residual == 0.0 {
                    break;
                }
            }
        }
        let eta = dot(&self.rho0, &v);
        (v, eta)
    }

    /// Deterministic policy greedy with respect to `v`, as a probability table.
    pub fn greedy_policy(&self, v: &[f64]) -> Vec<f64> {
        let mut probs = vec![0.0; self.n_states * self.n_actions];
        for s in 0..self.n_states {
            let best = (0..self.n_actions)
                .map(|a| (a, self.backup(v, s, a)))
                .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc })
                .0;
            probs[s * self.n_actions + best] = 1.0;
        }
        probs
    }

    /// Exact `V_π`, `Q_π` and `η` of the policy `probs[s·n_a + a]` by solving
    /// `(I − γP_π)V = r_π` with terminal rows pinned to zero.
    pub fn policy_evaluation(&self, probs: &[f64]) -> Result<PolicyValues, EnvError> {
        let (ns, na) = (self.n_states, self.n_actions);
        if probs.len() != ns * na {
            return Err(EnvError::InvalidModel(format!("policy table has {} entries", probs.len())));
        }
        let mut m = DMatrix::identity(ns, ns);
        let mut rhs = DVector::zeros(ns);
        for s in (0..ns).filter(|s| !self.terminal[*s]) {
            for a in 0..na {
                let pa = probs[s * na + a];
                if pa == 0.0 {
                    continue;
                }
                rhs[s] += pa * self.reward(s, a);
                for (s2, p) in self.transition(s, a).iter().enumerate() {
                    m[(s, s2)] -= self.gamma * pa * p;
                }
            }
        }
        let v: DVector<f64> = m.lu().solve(&rhs).ok_or(EnvError::SingularSystem)?;
        if v.iter().any(|x: &f64| !x.is_finite()) {
            return Err(EnvError::SingularSystem);
        }
        let v: Vec<f64> = v.iter().copied().collect();
        let q = (0..ns * na)
            .map(|i| if self.terminal[i / na] { 0.0 } else { self.backup(&v, i / na, i % na) })
            .collect();
        let eta = dot(&self.rho0, &v);
        Ok(PolicyValues { v, q, eta })
    }

    /// Expected fraction of sampled steps spent in each state when episodes of
    /// at most `horizon` steps are run under `probs`.
    pub fn step_visitation(&self, probs: &[f64]) -> Vec<f64> {
        let (ns, na) = (self.n_states, self.n_actions);
        let mut dist: Vec<f64> = self
            .rho0
            .iter()
            .enumerate()
            .map(|(s, p)| if self.terminal[s] { 0.0 } else { *p })
            .collect();
        let mut visits = vec![0.0; ns];
        for _ in 0..self.horizon {
            let mut next = vec![0.0; ns];
            for s in 0..ns {
                if dist[s] == 0.0 {
                    continue;
                }
                visits[s] += dist[s];
                for a in 0..na {
                    let w = dist[s] * probs[s * na + a];
                    for (s2, p) in self.transition(s, a).iter().enumerate() {
                        next[s2] += w * p;
                    }
                }
            }
            for (s, x) in next.iter_mut().enumerate() {
                if self.terminal[s] {
                    *x = 0.0;
                }
            }
            dist = next;
        }
        let total: f64 = visits.iter().sum();
        visits.iter().map(|x| x / total).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sample_index<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|x| *x > 0.0).unwrap_or(p.len() - 1)
}
