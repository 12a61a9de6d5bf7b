mod common;

use mtrep::baselines::{ind_rage, ind_rf_linucb};
use mtrep::model::{
    make_canonical_contextual, make_canonical_instance, ArmSet, ContextModel, ContextualInstance, LinearInstance,
    NoiseModel, RunConfig, TaskEnsemble,
};
use mtrep::repbai::dou_exp_des;
use mtrep::repbpi::c_dou_exp_des;
use nalgebra::{DMatrix, DVector};

fn canonical(tasks: usize) -> LinearInstance {
    let (arms, ensemble) = make_canonical_instance(5, 2, tasks).unwrap();
    LinearInstance::new(arms, ensemble, NoiseModel::default()).unwrap()
}

#[test]
fn ind_rage_identifies_every_best_arm() {
    let cfg = common::shipped("repbai.json").run;
    for seed in 0..3 {
        let r = ind_rage(&canonical(50), &RunConfig { seed, ..cfg.clone() }).unwrap();
        assert!(r.all_correct(), "seed {seed}");
        assert_eq!(r.audited_pulls, r.samples_total);
        assert_eq!(r.rho_e, None);
    }
}

#[test]
fn sample_ratio_falls_as_tasks_grow() {
    let cfg = common::shipped("repbai.json").run;
    let ratios: Vec<f64> = [50, 100, 150]
        .iter()
        .map(|&m| {
            let ours = dou_exp_des(&canonical(m), &cfg).unwrap().samples_total as f64;
            let base = ind_rage(&canonical(m), &cfg).unwrap().samples_total as f64;
            ours / base
        })
        .collect();
    assert!(ratios.windows(2).all(|w| w[1] < w[0]), "{ratios:?}");
}

#[test]
fn full_rank_instance_gives_equal_phase_one_budgets() {
    let arms = ArmSet::new(vec![
        DVector::from_vec(vec![1.0, 0.0]),
        DVector::from_vec(vec![0.0, 1.0]),
        DVector::from_vec(vec![0.6, 0.8]),
    ])
    .unwrap();
    let w = DMatrix::from_column_slice(2, 4, &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0]);
    let tasks = TaskEnsemble::new(DMatrix::identity(2, 2), w).unwrap();
    let instance = LinearInstance::new(arms, tasks, NoiseModel::default()).unwrap();
    let cfg = common::shipped("repbai.json").run;
    let ours = dou_exp_des(&instance, &cfg).unwrap();
    let base = ind_rage(&instance, &cfg).unwrap();
    for (a, b) in ours.phases[0].elimination_samples.iter().zip(&base.phases[0].elimination_samples) {
        assert!(a.abs_diff(*b) <= 1, "{a} vs {b}");
    }
}

#[test]
fn multi_phase_runs_shrink_candidates() {
    let cfg = RunConfig {
        scale_p: 0.01,
        scale_round: 0.01,
        scale_t: 0.01,
        scale_n: 0.05,
        ..RunConfig::default()
    };
    // a sixth arm 0.75 e_1 + 0.5 e_2 sits 0.25 below the best arm of the first group
    let mut arms: Vec<DVector<f64>> = ArmSet::canonical(5).arms().to_vec();
    arms.push(DVector::from_vec(vec![0.75, 0.5, 0.0, 0.0, 0.0]));
    let instance = LinearInstance::new(
        ArmSet::new(arms).unwrap(),
        TaskEnsemble::groups(5, 2, 6).unwrap(),
        NoiseModel::default(),
    )
    .unwrap();
    let mut multi_phase = 0;
    for seed in 0..2 {
        let cfg = RunConfig { seed, ..cfg.clone() };
        for r in [dou_exp_des(&instance, &cfg).unwrap(), ind_rage(&instance, &cfg).unwrap()] {
            assert!(r.all_correct());
            assert_eq!(r.audited_pulls, r.samples_total);
            assert!(!r.phase_cap_reached);
            assert!(r.phases.iter().all(|p| p.retention_ok));
            for p in &r.phases {
                assert!(p.candidates_after.iter().zip(&p.candidates_before).all(|(a, b)| a <= b));
            }
            if r.phases.len() > 1 {
                multi_phase += 1;
            }
        }
    }
    assert!(multi_phase > 0);
}

#[test]
fn ind_rf_linucb_is_epsilon_optimal() {
    let (contexts, tasks) = make_canonical_contextual(5, 2, 50, 5).unwrap();
    let instance = ContextualInstance::new(contexts, tasks, NoiseModel::default()).unwrap();
    let cfg = common::shipped("repbpi.json").run;
    let r = ind_rf_linucb(&instance, &cfg).unwrap();
    assert!(r.max_suboptimality() <= cfg.epsilon);
    assert_eq!(r.samples_total, 50 * r.reward_free_steps as u64);
    assert_eq!(r.audited_pulls, r.samples_total);
}

#[test]
fn single_action_is_trivially_optimal() {
    let contexts = ContextModel::new(
        vec![vec![DVector::from_vec(vec![1.0])], vec![DVector::from_vec(vec![0.5])]],
        vec![0.5, 0.5],
    )
    .unwrap();
    let tasks = TaskEnsemble::new(DMatrix::identity(1, 1), DMatrix::from_row_slice(1, 2, &[1.0, -1.0])).unwrap();
    let instance = ContextualInstance::new(contexts, tasks, NoiseModel::default()).unwrap();
    let cfg = RunConfig {
        scale_round: 1e-3,
        ..common::shipped("repbpi.json").run
    };
    for r in [c_dou_exp_des(&instance, &cfg).unwrap(), ind_rf_linucb(&instance, &cfg).unwrap()] {
        assert_eq!(r.max_suboptimality(), 0.0);
        assert_eq!(r.audited_pulls, r.samples_total);
    }
}
