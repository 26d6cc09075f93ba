use qntrpo::driver::{
    compare_run, train, train_observed, trpo_baseline_step, Algorithm, DriverError, LsConfig, SurrogateScale, TrainConfig,
};
use qntrpo::envs::EnvSpec;
use qntrpo::linalg::{quadratic_form, CgConfig, DenseSpd, Identity, ParamVector};
use qntrpo::policy::mean_kl;
use qntrpo::testfns::Quadratic;
use qntrpo::trustregion::Objective;

fn small(algorithm: Algorithm) -> TrainConfig {
    TrainConfig {
        algorithm,
        episodes: 5,
        batch_size: 500,
        ..Default::default()
    }
}

fn lqg(algorithm: Algorithm) -> TrainConfig {
    TrainConfig {
        env: EnvSpec::DoubleIntegrator {
            gamma: 0.99,
            horizon: 50,
        },
        ..small(algorithm)
    }
}

#[test]
fn same_config_and_seed_reproduce_records_bitwise() {
    for cfg in [
        small(Algorithm::Qntrpo),
        small(Algorithm::Trpo),
        lqg(Algorithm::Qntrpo),
        lqg(Algorithm::Trpo),
    ] {
        let mut a = train(&cfg).unwrap();
        let mut b = train(&cfg).unwrap();
        for r in a.records.iter_mut().chain(b.records.iter_mut()) {
            r.wall_ms = 0.0;
        }
        assert_eq!(a, b);
        let bits = |t: &ParamVector| t.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.theta), bits(&b.theta));
    }
}

#[test]
fn different_seeds_sample_different_batches() {
    let a = train(&small(Algorithm::Qntrpo)).unwrap();
    let b = train(&TrainConfig {
        seed: 1,
        ..small(Algorithm::Qntrpo)
    })
    .unwrap();
    assert_ne!(a.theta, b.theta);
}

#[test]
fn both_algorithms_see_the_same_first_batch() {
    let mut first = Vec::new();
    for alg in [Algorithm::Qntrpo, Algorithm::Trpo] {
        let mut seen = None;
        train_observed(&small(alg), |v| {
            if v.record.episode == 0 {
                seen = Some(v.batch.clone());
            }
        })
        .unwrap();
        first.push(seen.unwrap());
    }
    assert_eq!(first[0], first[1]);
}

#[test]
fn single_state_single_action_mdp_keeps_return_constant() {
    let cfg = TrainConfig {
        env: EnvSpec::Tabular {
            transitions: vec![vec![vec![1.0]]],
            rewards: vec![vec![0.5]],
            rho0: vec![1.0],
            terminal: vec![],
            gamma: 0.9,
            horizon: 20,
        },
        episodes: 4,
        batch_size: 50,
        ..Default::default()
    };
    for alg in [Algorithm::Qntrpo, Algorithm::Trpo] {
        let out = train(&TrainConfig { algorithm: alg, ..cfg.clone() }).unwrap();
        for r in &out.records {
            assert!((r.eta.unwrap() - 5.0).abs() < 1e-9);
        }
    }
}

#[test]
fn qntrpo_episode_invariants_hold() {
    let cfg = small(Algorithm::Qntrpo);
    let k = cfg.trust_region.max_iters;
    train_observed(&cfg, |v| {
        let r = v.record;
        let trace = r.trace.as_ref().unwrap();
        assert!(trace.records.len() <= k);
        assert_eq!(r.evaluations, trace.evaluations);
        assert!(r.evaluations <= 2 * k + 1);
        assert!(r.f_after <= r.f_before);
        for it in trace.records.iter().filter(|it| it.accepted) {
            assert!(it.metric_norm_sq <= it.delta * (1.0 + 1e-6));
        }
        assert_eq!(r.accepted_steps, trace.records.iter().filter(|it| it.accepted).count());
        assert!(r.kl.is_finite() && r.kl >= 0.0);
        assert!(!v.batch.episodes().is_empty() && r.steps >= cfg.batch_size);
    })
    .unwrap();
}

#[test]
fn trpo_updates_stay_inside_the_kl_bound() {
    let cfg = TrainConfig {
        episodes: 8,
        ..small(Algorithm::Trpo)
    };
    let delta = cfg.trust_region.delta_max;
    let out = train_observed(&cfg, |v| {
        let policy = qntrpo::policy::PolicySpec::tabular(26, 4);
        let kl = mean_kl(&policy, v.theta_old, v.theta_new, v.stats);
        assert!(kl <= delta * (1.0 + 1e-6), "kl = {kl}");
        assert_eq!(kl, v.record.kl);
        let ls = v.record.line_search.unwrap();
        if ls.accepted {
            assert!(v.record.f_after < v.record.f_before);
        } else {
            assert_eq!(v.theta_old, v.theta_new);
        }
    })
    .unwrap();
    assert!(out.records.iter().any(|r| r.line_search.unwrap().accepted));
}

#[test]
fn trpo_with_identity_metric_follows_the_gradient() {
    let q = Quadratic::with_curvatures(vec![1.0, 2.0, 4.0]);
    let theta_old = ParamVector::new(vec![0.3, -0.2, 0.1]).unwrap();
    let delta = 0.01;
    let (_, g) = q.value_grad(&theta_old).unwrap();
    let step = trpo_baseline_step(
        &q,
        &theta_old,
        &Identity(3),
        |t: &ParamVector| 0.5 * (t - &theta_old).norm_squared(),
        delta,
        &LsConfig::default(),
        &CgConfig::default(),
    );
    assert!(step.accepted);
    assert_eq!(step.alpha, 1.0);
    let moved = &theta_old - &step.theta;
    assert!((moved.norm_squared() - delta).abs() <= 1e-12);
    let cos = moved.dot(&g) / (moved.norm() * g.norm());
    assert!((cos - 1.0).abs() <= 1e-12);
}

#[test]
fn trpo_full_step_on_exactly_modelled_quadratic() {
    // f = ½θᵀAθ with F = A: the scaled natural-gradient step is a multiple of
    // −θ_old, and it decreases f whenever it does not overshoot the minimum.
    let curv = vec![0.5, 1.0, 3.0, 2.0];
    let q = Quadratic::with_curvatures(curv.clone());
    let f = DenseSpd::from_diagonal(&curv);
    let theta_old = ParamVector::new(vec![1.0, -1.0, 0.5, 2.0]).unwrap();
    let delta = 0.5;
    let step = trpo_baseline_step(
        &q,
        &theta_old,
        &f,
        |t: &ParamVector| 0.5 * quadratic_form(&f, &(t - &theta_old)).unwrap(),
        delta,
        &LsConfig::default(),
        &CgConfig::default(),
    );
    assert!(step.accepted);
    assert_eq!(step.alpha, 1.0);
    assert_eq!(step.backtracks, 0);
    let moved = &step.theta - &theta_old;
    assert!((quadratic_form(&f, &moved).unwrap() - delta).abs() <= 1e-9);
    let ratio = moved.as_slice()[0] / theta_old.as_slice()[0];
    for (m, t) in moved.as_slice().iter().zip(theta_old.as_slice()) {
        assert!((m / t - ratio).abs() <= 1e-9);
    }
}

#[test]
fn trpo_rejects_every_trial_when_the_bound_is_unreachable() {
    let q = Quadratic::with_curvatures(vec![1.0, 1.0]);
    let theta_old = ParamVector::new(vec![1.0, 1.0]).unwrap();
    let step = trpo_baseline_step(
        &q,
        &theta_old,
        &Identity(2),
        |_: &ParamVector| f64::INFINITY,
        0.1,
        &LsConfig::default(),
        &CgConfig::default(),
    );
    assert!(!step.accepted);
    assert_eq!(step.theta, theta_old);
    assert_eq!(step.evaluations, 1 + 11);
}

#[test]
fn carrying_curvature_changes_later_episodes_only() {
    let base = small(Algorithm::Qntrpo);
    let carry = TrainConfig {
        carry_curvature: true,
        ..base.clone()
    };
    let a = train(&base).unwrap();
    let b = train(&carry).unwrap();
    assert_eq!(a.records[0].f_after, b.records[0].f_after);
    assert_ne!(a.theta, b.theta);
}

#[test]
fn mean_scaling_is_available() {
    let cfg = TrainConfig {
        surrogate_scale: SurrogateScale::Mean,
        ..small(Algorithm::Qntrpo)
    };
    let out = train(&cfg).unwrap();
    assert_eq!(out.records.len(), 5);
}

#[test]
fn comparison_requires_matching_environments() {
    let a = small(Algorithm::Qntrpo);
    let b = lqg(Algorithm::Trpo);
    assert!(matches!(compare_run(&a, &b, &[0]), Err(DriverError::ConfigMismatch(_))));
    let c = TrainConfig {
        episodes: 7,
        ..small(Algorithm::Trpo)
    };
    assert!(matches!(compare_run(&a, &c, &[0]), Err(DriverError::ConfigMismatch(_))));
}

#[test]
fn self_comparison_gives_identical_curves() {
    let a = small(Algorithm::Qntrpo);
    let report = compare_run(&a, &a, &[0, 3]).unwrap();
    for (seed, _, ea, eb) in report.paired_curves() {
        assert!(seed == 0 || seed == 3);
        assert_eq!(ea, eb);
    }
    assert_eq!(report.median_episodes_a(), report.median_episodes_b());
    assert_eq!(report.a.len(), 2);
}

#[test]
fn config_rejects_unknown_keys() {
    let err = serde_json::from_str::<TrainConfig>(r#"{"episodes": 3, "bach_size": 10}"#).unwrap_err();
    assert!(err.to_string().contains("bach_size"));
    let cfg: TrainConfig = serde_json::from_str(r#"{"algorithm": "trpo", "trust_region": {"delta_max": 0.05}}"#).unwrap();
    assert_eq!(cfg.algorithm, Algorithm::Trpo);
    assert_eq!(cfg.trust_region.delta_max, 0.05);
    assert_eq!(cfg.batch_size, 2000);
}
