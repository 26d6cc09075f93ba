//! Policy optimization episodes: sample a batch under `θ^i`, build the
//! surrogate `f^i` and the Fisher metric at `θ^i`, and improve `θ` either by
//! QNTRM from `θ_0 = θ^i` or by a single TRPO line-search step.

mod compare;
mod critic;
mod trpo;

pub use compare::{check_comparable, compare_run, episodes_to_threshold, threshold_for, ComparisonReport, RunSummary};
pub use critic::{assign_values, CriticKind};
pub use trpo::{trpo_baseline_step, LsConfig, TrpoStep};

use std::cell::Cell;
use std::io::{self, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{batch_rng, Env, EnvError, EnvSpec};
use crate::linalg::{DenseSpd, ParamVector};
use crate::policy::{mean_kl, FisherOperator, PolicyError, PolicySpec, RolloutBatch, StateStats, SurrogateObjective};
use crate::trustregion::{
    qntrm_minimize, Objective, ObjectiveError, QntrmTrace, TrustRegionConfig, TrustRegionError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DriverError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    TrustRegion(#[from] TrustRegionError),
    #[error("configurations cannot be compared: {0}")]
    ConfigMismatch(String),
}

/// Weighting of the batch states in the surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateScale {
    /// Unnormalized discounted visitation: the batch mean times
    /// [`RolloutBatch::visitation_mass`].
    #[default]
    Visitation,
    /// Plain batch mean.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Qntrpo,
    Trpo,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Qntrpo => "qntrpo",
            Algorithm::Trpo => "trpo",
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub env: EnvSpec,
    /// `None` picks the environment's default family.
    pub policy: Option<PolicySpec>,
    pub algorithm: Algorithm,
    pub episodes: usize,
    /// Minimum transitions per batch; whole episodes are collected.
    pub batch_size: usize,
    /// GAE coefficient `λ`; `γ` belongs to the environment.
    pub lambda: f64,
    pub normalize_advantages: bool,
    /// Fisher damping relative to its mean diagonal.
    pub damping: f64,
    pub critic: CriticKind,
    pub seed: u64,
    /// Keep `B` and `δ` from the previous episode instead of resetting them
    /// to `I` and `δ̄`.
    pub carry_curvature: bool,
    pub surrogate_scale: SurrogateScale,
    /// QNTRM settings; `delta_max` is also the TRPO KL bound.
    pub trust_region: TrustRegionConfig,
    pub line_search: LsConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvSpec::default(),
            policy: None,
            algorithm: Algorithm::Qntrpo,
            episodes: 100,
            batch_size: 2000,
            lambda: 0.97,
            normalize_advantages: true,
            damping: 1e-4,
            critic: CriticKind::Auto,
            seed: 0,
            carry_curvature: false,
            surrogate_scale: SurrogateScale::Visitation,
            trust_region: TrustRegionConfig::default(),
            line_search: LsConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DriverError> {
        let fail = |m: String| Err(DriverError::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return fail(format!("lambda = {} must lie in (0, 1]", self.lambda));
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return fail(format!("damping = {} must be nonnegative", self.damping));
        }
        if !(self.line_search.c > 0.0 && self.line_search.c < 1.0) {
            return fail(format!("line_search.c = {} must lie in (0, 1)", self.line_search.c));
        }
        self.trust_region.validate()?;
        Ok(())
    }

    /// Builds the environment and resolves the policy family.
    pub fn build(&self) -> Result<(Env, PolicySpec), DriverError> {
        self.validate()?;
        let env = self.env.build()?;
        let policy = self.policy.unwrap_or_else(|| env.default_policy());
        env.check_policy(&policy)?;
        Ok((env, policy))
    }
}

/// TRPO line-search outcome for one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSearchSummary {
    pub accepted: bool,
    pub alpha: f64,
    pub backtracks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    /// Transitions in the batch.
    pub steps: usize,
    /// Mean discounted return of the batch episodes.
    pub mean_return: f64,
    /// Exact `η` of the updated policy, when the model allows it.
    pub eta: Option<f64>,
    pub f_before: f64,
    pub f_after: f64,
    pub accepted_steps: usize,
    /// Trust radius at the end of the episode.
    pub delta_final: f64,
    /// `mean_kl(θ^i, θ^{i+1})` over the batch states.
    pub kl: f64,
    pub wall_ms: f64,
    /// Objective evaluations (value and gradient together) this episode.
    pub evaluations: usize,
    pub trace: Option<QntrmTrace>,
    pub line_search: Option<LineSearchSummary>,
    pub warning: Option<String>,
}

impl EpisodeRecord {
    pub const CSV_HEADER: &'static str =
        "episode,mean_return,f_before,f_after,accepted_steps,delta_final,kl,wall_ms,eta,evals,steps";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{},{:?},{:?},{:.3},{},{},{}",
            self.episode,
            self.mean_return,
            self.f_before,
            self.f_after,
            self.accepted_steps,
            self.delta_final,
            self.kl,
            self.wall_ms,
            self.eta.map(|e| format!("{e:?}")).unwrap_or_default(),
            self.evaluations,
            self.steps
        )
    }
}

pub fn write_records_csv<W: Write>(records: &[EpisodeRecord], mut out: W) -> io::Result<()> {
    writeln!(out, "{}", EpisodeRecord::CSV_HEADER)?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub theta: ParamVector,
    pub policy: PolicySpec,
    pub records: Vec<EpisodeRecord>,
}

/// What an observer sees after each episode.
pub struct EpisodeView<'a> {
    pub theta_old: &'a ParamVector,
    pub theta_new: &'a ParamVector,
    pub batch: &'a RolloutBatch,
    pub stats: &'a StateStats,
    pub record: &'a EpisodeRecord,
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome, DriverError> {
    train_observed(cfg, |_| {})
}

/// [`train`], calling `observer` after every episode.
pub fn train_observed<F: FnMut(&EpisodeView)>(cfg: &TrainConfig, mut observer: F) -> Result<TrainOutcome, DriverError> {
    let (env, policy) = cfg.build()?;
    let critic = cfg.critic.resolve(&env);
    let mut theta = policy.initial_theta();
    let mut carried: Option<(DenseSpd, f64)> = None;
    let mut records = Vec::with_capacity(cfg.episodes);

    for episode in 0..cfg.episodes {
        let start = Instant::now();
        let mut rng = batch_rng(cfg.seed, episode as u64);
        let mut batch = env.sample_batch(&policy, &theta, cfg.batch_size, cfg.lambda, &mut rng)?;
        assign_values(critic, &env, &policy, &theta, &mut batch)?;
        batch.compute_advantages(cfg.normalize_advantages)?;
        let scale = match cfg.surrogate_scale {
            SurrogateScale::Visitation => batch.visitation_mass(),
            SurrogateScale::Mean => 1.0,
        };
        let objective = SurrogateObjective::new(policy, theta.clone(), &batch)?.with_scale(scale);
        let stats = StateStats::from_batch(&policy, &batch)?;
        let fisher = FisherOperator::with_relative_damping(&policy, &theta, &stats, cfg.damping);

        let step = match cfg.algorithm {
            Algorithm::Qntrpo => qntrpo_step(&objective, &fisher, &theta, cfg, &mut carried),
            Algorithm::Trpo => {
                let s = trpo_baseline_step(
                    &objective,
                    &theta,
                    &fisher,
                    |t: &ParamVector| mean_kl(&policy, &theta, t, &stats),
                    cfg.trust_region.delta_max,
                    &cfg.line_search,
                    &cfg.trust_region.cg,
                );
                EpisodeStep {
                    f_before: s.f_before,
                    f_after: s.f_after,
                    accepted_steps: usize::from(s.accepted),
                    delta_final: cfg.trust_region.delta_max,
                    evaluations: s.evaluations,
                    trace: None,
                    line_search: Some(LineSearchSummary {
                        accepted: s.accepted,
                        alpha: s.alpha,
                        backtracks: s.backtracks,
                    }),
                    warning: None,
                    theta: s.theta,
                }
            }
        };
        let kl = mean_kl(&policy, &theta, &step.theta, &stats);
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let eta = env.exact_return(&policy, &step.theta).ok();
        if let Some(w) = &step.warning {
            log::warn!("episode {episode}: {w}");
        }
        let record = EpisodeRecord {
            episode,
            steps: batch.num_steps(),
            mean_return: batch.mean_return(),
            eta,
            f_before: step.f_before,
            f_after: step.f_after,
            accepted_steps: step.accepted_steps,
            delta_final: step.delta_final,
            kl,
            wall_ms,
            evaluations: step.evaluations,
            trace: step.trace,
            line_search: step.line_search,
            warning: step.warning,
        };
        log::debug!(
            "episode {episode}: return {:.4}, eta {:?}, kl {:.3e}, accepted {}",
            record.mean_return,
            record.eta,
            record.kl,
            record.accepted_steps
        );
        observer(&EpisodeView {
            theta_old: &theta,
            theta_new: &step.theta,
            batch: &batch,
            stats: &stats,
            record: &record,
        });
        records.push(record);
        theta = step.theta;
    }
    Ok(TrainOutcome { theta, policy, records })
}

struct EpisodeStep {
    theta: ParamVector,
    f_before: f64,
    f_after: f64,
    accepted_steps: usize,
    delta_final: f64,
    evaluations: usize,
    trace: Option<QntrmTrace>,
    line_search: Option<LineSearchSummary>,
    warning: Option<String>,
}

/// Counts every call to the wrapped objective.
struct Counted<'a, O: ?Sized> {
    inner: &'a O,
    calls: Cell<usize>,
}

impl<O: Objective + ?Sized> Objective for Counted<'_, O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value_grad(&self, theta: &ParamVector) -> Result<(f64, ParamVector), ObjectiveError> {
        self.calls.set(self.calls.get() + 1);
        self.inner.value_grad(theta)
    }
}

fn qntrpo_step(
    objective: &SurrogateObjective,
    fisher: &FisherOperator,
    theta: &ParamVector,
    cfg: &TrainConfig,
    carried: &mut Option<(DenseSpd, f64)>,
) -> EpisodeStep {
    let d = theta.len();
    let mut tr = cfg.trust_region;
    let b_init = match carried.take() {
        Some((b, delta)) if cfg.carry_curvature => {
            tr.delta_init = Some(delta);
            b
        }
        _ => DenseSpd::identity(d),
    };
    let counted = Counted {
        inner: objective,
        calls: Cell::new(0),
    };
    match qntrm_minimize(&counted, |_: &ParamVector| fisher, theta.clone(), &tr, b_init) {
        Ok(res) => {
            let f_before = res.trace.records.first().map_or(res.f_value, |r| r.f);
            let warning = match &res.trace.termination {
                crate::trustregion::Termination::MetricSolveFailed(msg) => Some(format!("metric solve failed: {msg}")),
                _ => None,
            };
            if cfg.carry_curvature {
                *carried = Some((res.hessian.clone(), res.delta));
            }
            EpisodeStep {
                f_before,
                f_after: res.f_value,
                accepted_steps: res.trace.accepted_steps(),
                delta_final: res.delta,
                evaluations: counted.calls.get(),
                line_search: None,
                warning,
                theta: res.theta,
                trace: Some(res.trace),
            }
        }
        Err(err) => EpisodeStep {
            theta: theta.clone(),
            f_before: f64::NAN,
            f_after: f64::NAN,
            accepted_steps: 0,
            delta_final: tr.initial_radius(),
            evaluations: counted.calls.get(),
            trace: None,
            line_search: None,
            warning: Some(format!("inner optimization failed, policy kept: {err}")),
        },
    }
}
