mod common;

use mtrep::linalg;
use mtrep::model::{
    make_canonical_contextual, ContextModel, ContextualEnvironment, ContextualInstance, NoiseModel, RunConfig,
    TaskEnsemble,
};
use mtrep::repbpi::{self, estimate_context_distribution, greedy_policy, RewardFreeLearner};
use mtrep::rng::Streams;
use mtrep::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn canonical(tasks: usize, noise: NoiseModel) -> ContextualInstance {
    let (contexts, ensemble) = make_canonical_contextual(5, 2, tasks, 5).unwrap();
    ContextualInstance::new(contexts, ensemble, noise).unwrap()
}

fn random_contexts(seed: u64, d: usize, n_contexts: usize, n_actions: usize) -> ContextModel {
    let mut r = common::rng(seed);
    let features = (0..n_contexts)
        .map(|_| common::unit_arms(&mut r, d, n_actions))
        .collect();
    let raw: Vec<f64> = (0..n_contexts).map(|_| r.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    ContextModel::new(features, raw.iter().map(|p| p / total).collect()).unwrap()
}

#[test]
fn single_context_estimate_is_a_point_mass() {
    let (_, tasks) = make_canonical_contextual(3, 1, 2, 1).unwrap();
    let instance = ContextualInstance::new(ContextModel::canonical(3, 1), tasks, NoiseModel::default()).unwrap();
    let env = ContextualEnvironment::new(&instance);
    let (est, used) = estimate_context_distribution(&env, 50, &Streams::new(4)).unwrap();
    assert_eq!(est.distribution, vec![1.0]);
    assert_eq!(used, 50);
    assert_eq!(env.pulls(), 50);
}

#[test]
fn uniform_context_frequencies() {
    let instance = canonical(2, NoiseModel::default());
    let env = ContextualEnvironment::new(&instance);
    let (est, _) = estimate_context_distribution(&env, 100_000, &Streams::new(5)).unwrap();
    assert!((est.distribution.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for p in &est.distribution {
        assert!((p - 0.2).abs() < 0.01, "{p}");
    }
    for m in &est.moments {
        assert!((m - m.transpose()).norm() < 1e-15);
        assert!(linalg::min_eigenvalue(m) >= -1e-12);
    }
}

#[test]
fn moment_tables_concentrate() {
    let contexts = random_contexts(9, 4, 6, 3);
    let (_, tasks) = make_canonical_contextual(4, 1, 2, 1).unwrap();
    let instance = ContextualInstance::new(contexts.clone(), tasks, NoiseModel::default()).unwrap();
    let delta = 0.005;
    let t0 = 5000;
    let l2 = contexts.norm_bound().powi(2);
    let bound = 8.0 * l2 * (20.0 * (contexts.dim() * contexts.num_actions()) as f64 / delta).ln() / (t0 as f64).sqrt();
    let truth = contexts.moment_tables(contexts.distribution());
    let mut within = 0;
    for seed in 0..100 {
        let env = ContextualEnvironment::new(&instance);
        let (est, _) = estimate_context_distribution(&env, t0, &Streams::new(seed)).unwrap();
        let worst = est
            .moments
            .iter()
            .zip(&truth)
            .map(|(a, b)| linalg::spectral_norm(&(a - b)))
            .fold(0.0, f64::max);
        if worst <= bound {
            within += 1;
        }
    }
    assert!(within >= 95, "{within}/100");
}

#[test]
fn one_dimensional_ridge_matches_closed_form() {
    let b = DMatrix::from_column_slice(1, 1, &[1.0]);
    let tasks = TaskEnsemble::new(b.clone(), DMatrix::from_column_slice(1, 1, &[0.8])).unwrap();
    let contexts = ContextModel::new(vec![vec![DVector::from_vec(vec![1.0])]], vec![1.0]).unwrap();
    let instance = ContextualInstance::new(contexts, tasks, NoiseModel::zero()).unwrap();
    let env = ContextualEnvironment::new(&instance);
    let (est, used) = repbpi::est_low_rep(&env, 100, 1.0, &b, &Streams::new(0)).unwrap();
    assert_eq!(used, 100);
    assert!((est.theta_hat[0][0] - 0.8 * 100.0 / 101.0).abs() < 1e-10);
}

#[test]
fn uniform_random_policy_suboptimality() {
    let instance = canonical(50, NoiseModel::default());
    // averaging the constant policies gives the uniformly random policy
    let mut mean = vec![0.0; 50];
    for a in 0..5 {
        let policies = vec![vec![a; 5]; 50];
        let sub = repbpi::evaluate_policy_suboptimality(&instance, &policies).unwrap();
        for (acc, s) in mean.iter_mut().zip(&sub) {
            assert!(*s >= 0.0);
            *acc += s / 5.0;
        }
    }
    for s in mean {
        assert!((s - 0.8).abs() < 1e-12);
    }
    let greedy: Vec<Vec<usize>> = instance
        .tasks
        .thetas()
        .iter()
        .map(|t| greedy_policy(&instance.contexts, t))
        .collect();
    assert!(repbpi::evaluate_policy_suboptimality(&instance, &greedy)
        .unwrap()
        .iter()
        .all(|s| *s == 0.0));
}

#[test]
fn shipped_config_is_epsilon_optimal_with_exact_accounting() {
    let instance = canonical(50, NoiseModel::default());
    let cfg = common::shipped("repbpi.json").run;
    let r = repbpi::c_dou_exp_des(&instance, &cfg).unwrap();
    assert!(r.max_suboptimality() <= cfg.epsilon);
    let expected = r.context_samples + 2 * 50 * r.rounds * r.batch_size + 50 * r.reward_free_steps;
    assert_eq!(r.samples_total, expected as u64);
    assert_eq!(r.audited_pulls, r.samples_total);
    for spectrum in &r.policy.final_spectra {
        assert!(spectrum[0] >= cfg.gamma);
    }
}

#[test]
fn single_context_noiseless_picks_the_best_action() {
    let (_, tasks) = make_canonical_contextual(5, 2, 4, 1).unwrap();
    let instance = ContextualInstance::new(ContextModel::canonical(5, 1), tasks, NoiseModel::zero()).unwrap();
    let cfg = RunConfig {
        scale_round: 1e-3,
        ..common::shipped("repbpi.json").run
    };
    let r = repbpi::c_dou_exp_des(&instance, &cfg).unwrap();
    for m in 0..4 {
        let best = if m < 2 { 0 } else { 1 };
        assert_eq!(r.policy.policies[m], vec![best]);
    }
}

#[test]
fn coverage_failure_is_reported() {
    // one action cannot cover R^2
    let features = vec![vec![DVector::from_vec(vec![1.0, 0.0])]];
    let contexts = ContextModel::new(features, vec![1.0]).unwrap();
    let (_, tasks) = make_canonical_contextual(2, 1, 2, 1).unwrap();
    let instance = ContextualInstance::new(contexts, tasks, NoiseModel::default()).unwrap();
    let err = repbpi::c_dou_exp_des(&instance, &RunConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Assumption3Violated(_)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn uncertainty_shrinks_and_sigma_stays_definite(seed in 0u64..100_000, steps in 1usize..60) {
        let contexts = random_contexts(seed, 4, 3, 4);
        let mut r = common::rng(seed + 1);
        let basis = common::orthonormal(&mut r, 4, 2);
        let mut learner = RewardFreeLearner::new(basis, 1.0 + (seed % 3) as f64);
        let pairs: Vec<(usize, usize)> = (0..3).flat_map(|s| (0..4).map(move |a| (s, a))).collect();
        let mut previous = learner.expected_uncertainty(&contexts);
        let mut each: Vec<f64> = pairs.iter().map(|&(s, a)| learner.uncertainty(&contexts.features()[s][a])).collect();
        for _ in 0..steps {
            let s = r.random_range(0..3);
            let a = learner.choose(&contexts, s);
            learner.update(&contexts.features()[s][a], r.random_range(-1.0..1.0));
            prop_assert!(linalg::is_positive_definite(learner.sigma()));
            let now = learner.expected_uncertainty(&contexts);
            prop_assert!(now <= previous + 1e-12);
            previous = now;
            for (u, &(s, a)) in each.iter_mut().zip(&pairs) {
                let v = learner.uncertainty(&contexts.features()[s][a]);
                prop_assert!(v <= *u + 1e-12);
                *u = v;
            }
        }
    }

    #[test]
    fn greedy_policy_ignores_positive_scaling(seed in 0u64..100_000, c in 1e-3f64..1e3) {
        let contexts = random_contexts(seed, 3, 4, 5);
        let mut r = common::rng(seed);
        let theta = common::gaussian_matrix(&mut r, 3, 1).column(0).into_owned();
        prop_assert_eq!(greedy_policy(&contexts, &theta), greedy_policy(&contexts, &(&theta * c)));
    }

    #[test]
    fn suboptimality_is_never_negative(seed in 0u64..100_000) {
        let contexts = random_contexts(seed, 3, 4, 5);
        let mut r = common::rng(seed);
        let b = common::orthonormal(&mut r, 3, 2);
        let tasks = TaskEnsemble::new(b, common::gaussian_matrix(&mut r, 2, 3)).unwrap();
        let instance = ContextualInstance::new(contexts, tasks, NoiseModel::default()).unwrap();
        let policies: Vec<Vec<usize>> = (0..3).map(|_| (0..4).map(|_| r.random_range(0..5)).collect()).collect();
        for s in repbpi::evaluate_policy_suboptimality(&instance, &policies).unwrap() {
            prop_assert!(s >= 0.0);
        }
    }
}
