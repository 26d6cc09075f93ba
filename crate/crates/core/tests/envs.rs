use nalgebra::{DMatrix, DVector};
use qntrpo::envs::{batch_rng, policy_table, Env, EnvSpec, LqgEnv, TabularMdp};
use qntrpo::linalg::ParamVector;
use qntrpo::policy::{Observation, PolicySpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn visitation_l1(steps: usize, seed: u64) -> f64 {
    let env = EnvSpec::default().build().unwrap();
    let Env::Tabular(mdp) = &env else { unreachable!() };
    let policy = env.default_policy();
    let theta = policy.initial_theta();
    let batch = env
        .sample_batch(&policy, &theta, steps, 0.97, &mut batch_rng(seed, 0))
        .unwrap();
    let mut counts = vec![0.0; mdp.n_states()];
    for obs in batch.observations() {
        let Observation::Discrete(s) = obs else { unreachable!() };
        counts[*s] += 1.0;
    }
    let n = batch.num_steps() as f64;
    let model = mdp.step_visitation(&policy_table(&policy, &theta));
    counts.iter().zip(&model).map(|(c, m)| (c / n - m).abs()).sum()
}

#[test]
fn gridworld_visitation_matches_model() {
    let l1 = visitation_l1(100_000, 0);
    assert!(l1 <= 0.02, "L1 distance {l1}");
}

/// Sampling noise at 10^5 steps is close to the 0.02 bound; a sixteen times
/// larger sample must shrink the distance well below it.
#[test]
fn gridworld_visitation_converges() {
    let l1 = visitation_l1(1_600_000, 0);
    assert!(l1 <= 0.012, "L1 distance {l1}");
}

#[test]
fn policy_evaluation_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mdp = TabularMdp::random(6, 3, 0.8, 150, &mut rng);
    let env = Env::Tabular(mdp);
    let policy = env.default_policy();
    let theta = ParamVector::from_dvector(DVector::from_fn(policy.dim(), |_, _| rng.random_range(-1.0..1.0)));
    let exact = env.exact_return(&policy, &theta).unwrap();
    let mut sampler = batch_rng(7, 0);
    let returns: Vec<f64> = (0..100_000)
        .map(|_| env.sample_episode(&policy, &theta, &mut sampler).discounted_return(0.8))
        .collect();
    let (mean, se) = mean_and_stderr(&returns);
    assert!((mean - exact).abs() <= 3.0 * se, "MC {mean} ± {se} vs exact {exact}");
}

#[test]
fn riccati_policy_cost_matches_monte_carlo() {
    let env = LqgEnv::double_integrator(0.99, 40);
    let sol = env.riccati();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let costs: Vec<f64> = (0..20_000)
        .map(|_| {
            let mut x = env.sample_start(&mut rng);
            let mut total = 0.0;
            let mut discount = 1.0;
            for k in &sol.gains {
                let u = -(k * &x);
                let (c, next) = env.step(&x, &u, &mut rng);
                total += discount * c;
                discount *= 0.99;
                x = next;
            }
            total
        })
        .collect();
    let (mean, se) = mean_and_stderr(&costs);
    assert!((mean - sol.cost).abs() <= 3.0 * se, "MC {mean} ± {se} vs Riccati {}", sol.cost);
}

#[test]
fn stochastic_linear_policy_cost_matches_monte_carlo() {
    let env = Env::Lqg(LqgEnv::double_integrator(0.95, 30));
    let policy = PolicySpec::linear_gaussian(2, 1);
    let theta = ParamVector::new(vec![-0.8, -1.2, (0.3_f64).ln()]).unwrap();
    let exact = env.exact_return(&policy, &theta).unwrap();
    let mut rng = batch_rng(9, 0);
    let returns: Vec<f64> = (0..20_000)
        .map(|_| env.sample_episode(&policy, &theta, &mut rng).discounted_return(0.95))
        .collect();
    let (mean, se) = mean_and_stderr(&returns);
    assert!((mean - exact).abs() <= 3.0 * se, "MC {mean} ± {se} vs exact {exact}");
    assert!(exact <= env.optimal_return());
}

#[test]
fn uniform_gridworld_policy_is_far_from_optimal() {
    let env = EnvSpec::default().build().unwrap();
    let policy = env.default_policy();
    let eta = env.exact_return(&policy, &policy.initial_theta()).unwrap();
    let eta_star = env.optimal_return();
    assert!(eta < 0.5 * eta_star, "uniform {eta} vs optimal {eta_star}");
}

#[test]
fn noise_free_lqg_sampling_is_linear() {
    let env = LqgEnv::new(
        DMatrix::identity(1, 1) * 0.5,
        DMatrix::identity(1, 1),
        DMatrix::identity(1, 1),
        DMatrix::identity(1, 1),
        DMatrix::zeros(1, 1),
        DMatrix::identity(1, 1),
        1.0,
        3,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x0 = env.sample_start(&mut rng);
    let (c, x1) = env.step(&x0, &DVector::from_element(1, 1.0), &mut rng);
    assert!((x1[0] - (0.5 * x0[0] + 1.0)).abs() < 1e-15);
    assert!((c - (x0[0] * x0[0] + 1.0)).abs() < 1e-15);
}
