use std::io::Write;
use std::path::Path;

use qntrpo::driver::{
    check_comparable, compare_run, episodes_to_threshold, threshold_for, train, write_records_csv, ComparisonReport, TrainConfig,
    TrainOutcome,
};
use qntrpo::envs::EnvSpec;
use qntrpo::linalg::ParamVector;
use qntrpo::trustregion::{qntrm_minimize, IterationRecord, Termination};
use serde::Serialize;
use serde_json::json;

use crate::config::{OptimizeConfig, RawConfig};
use crate::error::CliError;
use crate::output::{create, opt, path_in, prepare_dir, write_json, RunManifest};

/// Runs `body` between the initial and the final manifest write.
fn with_manifest<F>(out: &Path, mut manifest: RunManifest, body: F) -> Result<(), CliError>
where
    F: FnOnce(&Path) -> Result<(), CliError>,
{
    prepare_dir(out)?;
    manifest.write(out)?;
    let result = body(out);
    manifest.finish(out, &result)?;
    result
}

pub fn optimize(config: &Path, out: &Path, overrides: &[String]) -> Result<(), CliError> {
    let raw = RawConfig::load(config, overrides)?;
    let cfg: OptimizeConfig = raw.bind()?;
    cfg.trust_region.validate()?;
    let dim = cfg.function.dim();
    let metric = cfg.metric.build(dim)?;
    let start = match &cfg.start {
        Some(v) => ParamVector::new(v.clone()).map_err(|e| CliError::Parse(format!("start: {e}")))?,
        None => cfg.function.default_start(),
    };
    if start.len() != dim {
        return Err(CliError::Parse(format!("start has {} entries, function has dimension {dim}", start.len())));
    }
    let mut manifest = RunManifest::new("optimize", vec![raw.path.clone()], vec![raw.hash()], vec![]);
    manifest.outputs = vec!["trace.csv".into(), "summary.json".into()];

    with_manifest(out, manifest, |dir| {
        let objective = cfg.function.build();
        let res = qntrm_minimize(
            objective.as_ref(),
            |_: &ParamVector| &metric,
            start,
            &cfg.trust_region,
            qntrpo::linalg::DenseSpd::identity(dim),
        )?;
        let mut w = create(&path_in(dir, "trace.csv"))?;
        res.trace.write_csv(&mut w)?;
        w.flush()?;
        let grad_norm = res.gradient.norm();
        let summary = json!({
            "config": cfg,
            "config_hash": raw.hash(),
            "theta": res.theta.to_vec(),
            "f": res.f_value,
            "grad_norm": grad_norm,
            "distance_to_minimizer": (&res.theta - &cfg.function.minimizer()).norm(),
            "iterations": res.trace.records.len(),
            "accepted_steps": res.trace.accepted_steps(),
            "evaluations": res.trace.evaluations,
            "delta_final": res.delta,
            "termination": res.trace.termination,
            "converged": grad_norm <= cfg.trust_region.grad_tol,
        });
        write_json(&path_in(dir, "summary.json"), &summary)?;
        log::info!(
            "{} iterations, f = {:e}, ‖∇f‖ = {:e}",
            res.trace.records.len(),
            res.f_value,
            grad_norm
        );
        match &res.trace.termination {
            Termination::MetricSolveFailed(msg) => Err(CliError::Numerical(format!("metric solve failed: {msg}"))),
            _ if !res.f_value.is_finite() => Err(CliError::Numerical("objective is not finite".into())),
            _ => Ok(()),
        }
    })
}

fn horizon_note(env: &EnvSpec) -> String {
    let horizon = match env {
        EnvSpec::Gridworld { horizon, .. }
        | EnvSpec::Tabular { horizon, .. }
        | EnvSpec::Lqg { horizon, .. }
        | EnvSpec::DoubleIntegrator { horizon, .. } => *horizon,
    };
    format!("sampled episodes are truncated at horizon {horizon}; the reference experiments used trajectories of up to 2000 steps")
}

fn load_train(config: &Path, overrides: &[String]) -> Result<(RawConfig, TrainConfig), CliError> {
    let raw = RawConfig::load(config, overrides)?;
    let cfg: TrainConfig = raw.bind()?;
    cfg.validate()?;
    // Surface environment errors before any output is written.
    cfg.build()?;
    Ok((raw, cfg))
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config: &'a TrainConfig,
    config_hash: &'a str,
    seed: u64,
    episodes: usize,
    optimal_return: f64,
    threshold: f64,
    episodes_to_threshold: Option<usize>,
    final_eta: Option<f64>,
    final_mean_return: Option<f64>,
    total_steps: usize,
    total_evaluations: usize,
    warnings: usize,
    theta: Vec<f64>,
}

fn write_train_outputs(
    dir: &Path,
    seed: u64,
    cfg: &TrainConfig,
    hash: &str,
    eta_star: f64,
    out: &TrainOutcome,
) -> Result<(), CliError> {
    let mut w = create(&path_in(dir, &format!("episodes_seed{seed}.csv")))?;
    write_records_csv(&out.records, &mut w)?;
    w.flush()?;
    if out.records.iter().any(|r| r.trace.is_some()) {
        let mut w = create(&path_in(dir, &format!("inner_seed{seed}.csv")))?;
        writeln!(w, "episode,{}", IterationRecord::CSV_HEADER)?;
        for r in &out.records {
            for it in r.trace.iter().flat_map(|t| t.records.iter()) {
                writeln!(w, "{},{}", r.episode, it.csv_row())?;
            }
        }
        w.flush()?;
    }
    let threshold = threshold_for(eta_star);
    let summary = TrainSummary {
        config: cfg,
        config_hash: hash,
        seed,
        episodes: out.records.len(),
        optimal_return: eta_star,
        threshold,
        episodes_to_threshold: episodes_to_threshold(&out.records, threshold),
        final_eta: out.records.last().and_then(|r| r.eta),
        final_mean_return: out.records.last().map(|r| r.mean_return),
        total_steps: out.records.iter().map(|r| r.steps).sum(),
        total_evaluations: out.records.iter().map(|r| r.evaluations).sum(),
        warnings: out.records.iter().filter(|r| r.warning.is_some()).count(),
        theta: out.theta.to_vec(),
    };
    write_json(&path_in(dir, &format!("summary_seed{seed}.json")), &summary)
}

pub fn train_cmd(config: &Path, out: &Path, seeds: &[u64], overrides: &[String]) -> Result<(), CliError> {
    let (raw, cfg) = load_train(config, overrides)?;
    let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.to_vec() };
    let hash = raw.hash();
    let mut manifest = RunManifest::new("train", vec![raw.path.clone()], vec![hash.clone()], seeds.clone());
    for s in &seeds {
        manifest.outputs.push(format!("episodes_seed{s}.csv"));
        if cfg.algorithm == qntrpo::driver::Algorithm::Qntrpo {
            manifest.outputs.push(format!("inner_seed{s}.csv"));
        }
        manifest.outputs.push(format!("summary_seed{s}.json"));
    }
    manifest.notes.push(horizon_note(&cfg.env));
    let (env, _) = cfg.build()?;
    let eta_star = env.optimal_return();

    with_manifest(out, manifest, |dir| {
        let results: Vec<Result<(), CliError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .iter()
                .map(|&seed| {
                    let cfg = TrainConfig { seed, ..cfg.clone() };
                    let hash = &hash;
                    scope.spawn(move || {
                        let outcome = train(&cfg)?;
                        write_train_outputs(dir, seed, &cfg, hash, eta_star, &outcome)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect()
        });
        results.into_iter().collect()
    })
}

fn write_comparison(dir: &Path, report: &ComparisonReport, hashes: &[String]) -> Result<(), CliError> {
    let csv_err = |e: csv::Error| CliError::Output(e.to_string());

    let mut w = csv::Writer::from_path(path_in(dir, "curves.csv")).map_err(csv_err)?;
    w.write_record(["seed", "episode", "eta_a", "eta_b", "eta_diff", "mean_return_a", "mean_return_b", "kl_a", "kl_b"])
        .map_err(csv_err)?;
    for (ra, rb) in report.a.iter().zip(&report.b) {
        for (ea, eb) in ra.records.iter().zip(&rb.records) {
            let diff = ea.eta.zip(eb.eta).map(|(a, b)| a - b);
            w.write_record([
                ra.seed.to_string(),
                ea.episode.to_string(),
                opt(ea.eta),
                opt(eb.eta),
                opt(diff),
                format!("{:?}", ea.mean_return),
                format!("{:?}", eb.mean_return),
                format!("{:?}", ea.kl),
                format!("{:?}", eb.kl),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(path_in(dir, "thresholds.csv")).map_err(csv_err)?;
    w.write_record(["seed", "episodes_a", "episodes_b"]).map_err(csv_err)?;
    let cell = |e: Option<usize>| e.map(|v| v.to_string()).unwrap_or_default();
    for (ra, rb) in report.a.iter().zip(&report.b) {
        w.write_record([ra.seed.to_string(), cell(ra.episodes_to_threshold), cell(rb.episodes_to_threshold)])
            .map_err(csv_err)?;
    }
    w.flush()?;

    let (ma, sa) = report.timing_a();
    let (mb, sb) = report.timing_b();
    let alg = |runs: &[qntrpo::driver::RunSummary]| runs.first().map_or("", |r| r.algorithm.as_str()).to_string();
    let mut w = csv::Writer::from_path(path_in(dir, "timing.csv")).map_err(csv_err)?;
    w.write_record(["side", "algorithm", "mean_s", "std_s", "episodes"]).map_err(csv_err)?;
    let episodes: usize = report.a.iter().map(|r| r.records.len()).sum();
    for (side, runs, m, s) in [("a", &report.a, ma, sa), ("b", &report.b, mb, sb)] {
        w.write_record([
            side.to_string(),
            alg(runs),
            format!("{:.6}", m / 1e3),
            format!("{:.6}", s / 1e3),
            episodes.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    let finite = |x: f64| if x.is_finite() { json!(x) } else { json!(null) };
    let summary = json!({
        "config_hashes": hashes,
        "seeds": report.seeds,
        "optimal_return": report.eta_star,
        "threshold": report.threshold,
        "algorithm_a": alg(&report.a),
        "algorithm_b": alg(&report.b),
        "median_episodes_a": finite(report.median_episodes_a()),
        "median_episodes_b": finite(report.median_episodes_b()),
        "final_eta_a": report.a.iter().map(|r| r.final_eta).collect::<Vec<_>>(),
        "final_eta_b": report.b.iter().map(|r| r.final_eta).collect::<Vec<_>>(),
    });
    write_json(&path_in(dir, "summary.json"), &summary)
}

pub fn compare_cmd(
    config_a: &Path,
    config_b: &Path,
    out: &Path,
    seeds: &[u64],
    overrides: &[String],
) -> Result<(), CliError> {
    let (raw_a, cfg_a) = load_train(config_a, overrides)?;
    let (raw_b, cfg_b) = load_train(config_b, overrides)?;
    let seeds = if seeds.is_empty() { vec![0, 1, 2, 3, 4] } else { seeds.to_vec() };
    let hashes = vec![raw_a.hash(), raw_b.hash()];
    // Reject incompatible pairs before creating any output.
    check_comparable(&cfg_a, &cfg_b)?;
    let mut manifest = RunManifest::new(
        "compare",
        vec![raw_a.path.clone(), raw_b.path.clone()],
        hashes.clone(),
        seeds.clone(),
    );
    manifest.outputs = ["curves.csv", "thresholds.csv", "timing.csv", "summary.json"]
        .map(String::from)
        .to_vec();
    manifest.notes.push(horizon_note(&cfg_a.env));
    with_manifest(out, manifest, |dir| {
        let report = compare_run(&cfg_a, &cfg_b, &seeds)?;
        write_comparison(dir, &report, &hashes)
    })
}
