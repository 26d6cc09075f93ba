use serde::{Deserialize, Serialize};

use super::{train, Algorithm, DriverError, EpisodeRecord, TrainConfig};

/// `η* − 0.05·|η*|`.
pub fn threshold_for(eta_star: f64) -> f64 {
    eta_star - 0.05 * eta_star.abs()
}

/// 1-based index of the first episode whose exact return reaches `threshold`.
pub fn episodes_to_threshold(records: &[EpisodeRecord], threshold: f64) -> Option<usize> {
    records
        .iter()
        .position(|r| r.eta.is_some_and(|e| e >= threshold))
        .map(|i| i + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub algorithm: Algorithm,
    pub episodes_to_threshold: Option<usize>,
    pub final_eta: Option<f64>,
    pub records: Vec<EpisodeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seeds: Vec<u64>,
    pub eta_star: f64,
    pub threshold: f64,
    pub a: Vec<RunSummary>,
    pub b: Vec<RunSummary>,
}

/// Median with unreached runs counted as `+∞`.
fn median_episodes(runs: &[RunSummary]) -> f64 {
    let mut v: Vec<f64> = runs
        .iter()
        .map(|r| r.episodes_to_threshold.map_or(f64::INFINITY, |e| e as f64))
        .collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        let (lo, hi) = (v[n / 2 - 1], v[n / 2]);
        if hi.is_infinite() {
            hi
        } else {
            0.5 * (lo + hi)
        }
    }
}

/// Mean and population standard deviation of per-episode wall time.
fn timing(runs: &[RunSummary]) -> (f64, f64) {
    let t: Vec<f64> = runs.iter().flat_map(|r| r.records.iter().map(|e| e.wall_ms)).collect();
    if t.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = t.len() as f64;
    let mean = t.iter().sum::<f64>() / n;
    let var = t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ComparisonReport {
    pub fn median_episodes_a(&self) -> f64 {
        median_episodes(&self.a)
    }

    pub fn median_episodes_b(&self) -> f64 {
        median_episodes(&self.b)
    }

    /// `(mean, std)` of per-episode milliseconds for run `a`.
    pub fn timing_a(&self) -> (f64, f64) {
        timing(&self.a)
    }

    pub fn timing_b(&self) -> (f64, f64) {
        timing(&self.b)
    }

    /// Paired learning curves: rows of `seed, episode, eta_a, eta_b`.
    pub fn paired_curves(&self) -> Vec<(u64, usize, Option<f64>, Option<f64>)> {
        let mut rows = Vec::new();
        for (ra, rb) in self.a.iter().zip(&self.b) {
            for (ea, eb) in ra.records.iter().zip(&rb.records) {
                rows.push((ra.seed, ea.episode, ea.eta, eb.eta));
            }
        }
        rows
    }
}

/// The pairing checks `compare_run` applies before training anything.
pub fn check_comparable(a: &TrainConfig, b: &TrainConfig) -> Result<(), DriverError> {
    if a.env != b.env {
        return Err(DriverError::ConfigMismatch("environments differ".into()));
    }
    if a.policy != b.policy {
        return Err(DriverError::ConfigMismatch("policy families differ".into()));
    }
    if a.episodes != b.episodes || a.batch_size != b.batch_size {
        return Err(DriverError::ConfigMismatch("episode counts or batch sizes differ".into()));
    }
    Ok(())
}

/// Trains `a` and `b` on every seed (in parallel threads) and compares how
/// fast each reaches within 5% of the optimal return.
///
/// The two configurations must share environment, policy family, batch size
/// and episode count.
pub fn compare_run(a: &TrainConfig, b: &TrainConfig, seeds: &[u64]) -> Result<ComparisonReport, DriverError> {
    check_comparable(a, b)?;
    if seeds.is_empty() {
        return Err(DriverError::Config("at least one seed is required".into()));
    }
    let (env, _) = a.build()?;
    b.validate()?;
    let eta_star = env.optimal_return();
    let threshold = threshold_for(eta_star);

    let jobs: Vec<TrainConfig> = seeds
        .iter()
        .flat_map(|&seed| {
            [a, b].map(|c| TrainConfig {
                seed,
                ..c.clone()
            })
        })
        .collect();
    let results: Vec<Result<RunSummary, DriverError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|cfg| {
                scope.spawn(move || {
                    train(cfg).map(|out| RunSummary {
                        seed: cfg.seed,
                        algorithm: cfg.algorithm,
                        episodes_to_threshold: episodes_to_threshold(&out.records, threshold),
                        final_eta: out.records.last().and_then(|r| r.eta),
                        records: out.records,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    });

    let mut ra = Vec::with_capacity(seeds.len());
    let mut rb = Vec::with_capacity(seeds.len());
    for (i, r) in results.into_iter().enumerate() {
        if i % 2 == 0 {
            ra.push(r?);
        } else {
            rb.push(r?);
        }
    }
    Ok(ComparisonReport {
        seeds: seeds.to_vec(),
        eta_star,
        threshold,
        a: ra,
        b: rb,
    })
}
