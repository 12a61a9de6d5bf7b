//! Multi-task policy identification in contextual bandits: C-DouExpDes.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::design;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ContextModel, ContextualEnvironment, ContextualInstance, RunConfig};
use crate::rng::{stage, Streams};
use crate::rounding::{self, Criterion};
use crate::subspace::{self, c_feat_recover};

/// Contexts seen during the estimation stage and the moments they induce.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalContextDistribution {
    pub counts: Vec<usize>,
    pub distribution: Vec<f64>,
    /// `E_{s ~ D_hat}[phi(s,a) phi(s,a)^T]` per action.
    pub moments: Vec<DMatrix<f64>>,
}

/// Draws `t0` contexts, each followed by a uniformly random action whose
/// reward is discarded. Tasks are visited round-robin.
pub fn estimate_context_distribution(
    env: &ContextualEnvironment<'_>,
    t0: usize,
    streams: &Streams,
) -> Result<(EmpiricalContextDistribution, u64)> {
    if t0 == 0 {
        return Err(Error::Config("context estimation needs T0 >= 1".into()));
    }
    let instance = env.instance();
    let contexts = &instance.contexts;
    let tasks = instance.tasks.num_tasks();
    let mut rng = streams.stream(&[stage::CONTEXT_ESTIMATION]);
    let mut counts = vec![0usize; contexts.num_contexts()];
    for tau in 0..t0 {
        let s = env.observe_context(&mut rng);
        let a = rng.random_range(0..contexts.num_actions());
        env.act(tau % tasks, s, a, &mut rng)?;
        counts[s] += 1;
    }
    let distribution: Vec<f64> = counts.iter().map(|&c| c as f64 / t0 as f64).collect();
    let moments = contexts.moment_tables(&distribution);
    Ok((
        EmpiricalContextDistribution {
            counts,
            distribution,
            moments,
        },
        t0 as u64,
    ))
}

/// `ceil(scale_T0 32^2 (1+zeta)^2 L_phi^4 / nu^2 log^2(20 d |A| / delta))`.
pub fn context_samples(contexts: &ContextModel, cfg: &RunConfig) -> usize {
    let lead = 1024.0 * (1.0 + cfg.zeta).powi(2) * contexts.norm_bound().powi(4)
        / (cfg.nu_floor * cfg.nu_floor);
    let log = (20.0 * (contexts.dim() * contexts.num_actions()) as f64 / cfg.delta).ln();
    (cfg.scale_t0 * lead * log * log).ceil().max(1.0) as usize
}

/// `ceil(scale_N (k^2 + gamma k L_w^2) / eps^2 log^4(gamma k L_w / (eps delta)))`.
pub fn reward_free_samples(rank: usize, prediction_norm: f64, delta: f64, cfg: &RunConfig) -> usize {
    let k = rank as f64;
    let lead = (k * k + cfg.gamma * k * prediction_norm * prediction_norm) / (cfg.epsilon * cfg.epsilon);
    let log = (cfg.gamma * k * prediction_norm / (cfg.epsilon * delta)).ln().max(1.0);
    (cfg.scale_n * lead * log.powi(4)).ceil().max(1.0) as usize
}

/// `ceil(scale_T (1+zeta)^2 k^4 L_phi^4 L_w^4 / (M nu^2 eps^2))`, at least 1.
pub fn recovery_rounds(
    rank: usize,
    feature_norm: f64,
    prediction_norm: f64,
    tasks: usize,
    cfg: &RunConfig,
) -> usize {
    let v = (1.0 + cfg.zeta).powi(2)
        * (rank as f64).powi(4)
        * feature_norm.powi(4)
        * prediction_norm.powi(4)
        / (tasks as f64 * cfg.nu_floor * cfg.nu_floor * cfg.epsilon * cfg.epsilon);
    (cfg.scale_t * v).ceil().max(1.0) as usize
}

/// `ceil(scale_p 32^2 (1+zeta)^2 L_phi^4 / nu^2 log^2(40 d M T / delta))`.
pub fn action_batch_size(contexts: &ContextModel, tasks: usize, rounds: usize, cfg: &RunConfig) -> usize {
    let lead = 1024.0 * (1.0 + cfg.zeta).powi(2) * contexts.norm_bound().powi(4)
        / (cfg.nu_floor * cfg.nu_floor);
    let log = (40.0 * (contexts.dim() * tasks * rounds) as f64 / cfg.delta).ln();
    (cfg.scale_p * lead * log * log).ceil().max(1.0) as usize
}

/// Ridge state of reward-free exploration in a fixed `k`-dimensional feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardFreeLearner {
    basis: DMatrix<f64>,
    sigma: DMatrix<f64>,
    sigma_inv: DMatrix<f64>,
    b: DVector<f64>,
    steps: usize,
}

impl RewardFreeLearner {
    pub fn new(basis: DMatrix<f64>, gamma: f64) -> Self {
        let k = basis.ncols();
        Self {
            basis,
            sigma: DMatrix::identity(k, k) * gamma,
            sigma_inv: DMatrix::identity(k, k) / gamma,
            b: DVector::zeros(k),
            steps: 0,
        }
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `B_hat^T phi` for every context-action pair.
    pub fn project(&self, contexts: &ContextModel) -> Vec<Vec<DVector<f64>>> {
        contexts
            .features()
            .iter()
            .map(|row| row.iter().map(|phi| self.basis.tr_mul(phi)).collect())
            .collect()
    }

    /// `||z||_{Sigma^{-1}}` for an already projected feature.
    pub fn reduced_uncertainty(&self, z: &DVector<f64>) -> f64 {
        let k = z.len();
        let mut q = 0.0;
        for i in 0..k {
            let mut row = 0.0;
            for j in 0..k {
                row += self.sigma_inv[(i, j)] * z[j];
            }
            q += z[i] * row;
        }
        q.max(0.0).sqrt()
    }

    /// `||B_hat^T phi||_{Sigma^{-1}}`.
    pub fn uncertainty(&self, phi: &DVector<f64>) -> f64 {
        self.reduced_uncertainty(&self.basis.tr_mul(phi))
    }

    /// Most uncertain of the projected features; lowest index on ties.
    pub fn choose_reduced(&self, row: &[DVector<f64>]) -> usize {
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for (a, z) in row.iter().enumerate() {
            let u = self.reduced_uncertainty(z);
            if u > best_val {
                best_val = u;
                best = a;
            }
        }
        best
    }

    /// Most uncertain action in context `s`; lowest index on ties.
    pub fn choose(&self, contexts: &ContextModel, s: usize) -> usize {
        let row: Vec<DVector<f64>> = contexts.features()[s]
            .iter()
            .map(|phi| self.basis.tr_mul(phi))
            .collect();
        self.choose_reduced(&row)
    }

    /// `E_{s ~ D}[max_a ||B_hat^T phi(s,a)||_{Sigma^{-1}}]`, exact over the finite context set.
    pub fn expected_uncertainty(&self, contexts: &ContextModel) -> f64 {
        contexts
            .distribution()
            .iter()
            .zip(contexts.features())
            .map(|(p, row)| p * row.iter().map(|phi| self.uncertainty(phi)).fold(0.0, f64::max))
            .sum()
    }

    pub fn update(&mut self, phi: &DVector<f64>, reward: f64) {
        let z = self.basis.tr_mul(phi);
        self.update_reduced(&z, reward);
    }

    /// Rank-one update with an already projected feature.
    pub fn update_reduced(&mut self, z: &DVector<f64>, reward: f64) {
        self.sigma.ger(1.0, z, z, 1.0);
        self.b.axpy(reward, z, 1.0);
        // Sherman-Morrison keeps the inverse current for action selection
        let sz = &self.sigma_inv * z;
        let denom = 1.0 + z.dot(&sz);
        self.sigma_inv.ger(-1.0 / denom, &sz, &sz, 1.0);
        self.steps += 1;
    }

    /// Exact ridge solution `B_hat Sigma^{-1} sum B_hat^T phi r`.
    pub fn estimate(&self) -> DVector<f64> {
        let w = linalg::spd_solve(&self.sigma, &self.b).expect("ridge Gram is positive definite");
        &self.basis * w
    }
}

/// Greedy policy of `theta` over every context; lowest action index on ties.
pub fn greedy_policy(contexts: &ContextModel, theta: &DVector<f64>) -> Vec<usize> {
    contexts
        .features()
        .iter()
        .map(|row| {
            let mut best = 0;
            let mut best_val = f64::NEG_INFINITY;
            for (a, phi) in row.iter().enumerate() {
                let v = phi.dot(theta);
                if v > best_val {
                    best_val = v;
                    best = a;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEstimate {
    pub theta_hat: Vec<DVector<f64>>,
    /// `policies[m][s]`.
    pub policies: Vec<Vec<usize>>,
    /// Eigenvalues of the final ridge Gram per task, ascending.
    pub final_spectra: Vec<Vec<f64>>,
}

/// Reward-free exploration in the span of `basis` for every task, `n` steps each.
pub fn est_low_rep(
    env: &ContextualEnvironment<'_>,
    n: usize,
    gamma: f64,
    basis: &DMatrix<f64>,
    streams: &Streams,
) -> Result<(PolicyEstimate, u64)> {
    let instance = env.instance();
    let contexts = &instance.contexts;
    if basis.nrows() != contexts.dim() {
        return Err(Error::ShapeMismatch(format!(
            "basis has {} rows for features in R^{}",
            basis.nrows(),
            contexts.dim()
        )));
    }
    if !(gamma >= 1.0) {
        return Err(Error::Config(format!("gamma must be >= 1, got {gamma}")));
    }
    let tasks = instance.tasks.num_tasks();
    let learned: Vec<(DVector<f64>, Vec<f64>)> = (0..tasks)
        .into_par_iter()
        .map(|m| {
            let mut rng = streams.stream(&[stage::REWARD_FREE, m as u64]);
            let mut learner = RewardFreeLearner::new(basis.clone(), gamma);
            let reduced = learner.project(contexts);
            for _ in 0..n {
                let s = env.observe_context(&mut rng);
                let a = learner.choose_reduced(&reduced[s]);
                let r = env.act(m, s, a, &mut rng)?;
                learner.update_reduced(&reduced[s][a], r);
            }
            let spectrum: Vec<f64> = linalg::sym_eigen(learner.sigma()).0.iter().cloned().collect();
            assert!(spectrum[0] >= gamma * (1.0 - 1e-9), "ridge Gram lost definiteness");
            Ok((learner.estimate(), spectrum))
        })
        .collect::<Result<_>>()?;
    let (theta_hat, final_spectra): (Vec<_>, Vec<_>) = learned.into_iter().unzip();
    let policies = theta_hat.iter().map(|t| greedy_policy(contexts, t)).collect();
    Ok((
        PolicyEstimate {
            theta_hat,
            policies,
            final_spectra,
        },
        (tasks * n) as u64,
    ))
}

/// `E_{s ~ D}[max_a phi(s,a)^T theta_m - phi(s, pi_m(s))^T theta_m]` per task,
/// using the true distribution and rewards.
pub fn evaluate_policy_suboptimality(
    instance: &ContextualInstance,
    policies: &[Vec<usize>],
) -> Result<Vec<f64>> {
    let contexts = &instance.contexts;
    if policies.len() != instance.tasks.num_tasks() {
        return Err(Error::InvalidShape(format!(
            "{} policies for {} tasks",
            policies.len(),
            instance.tasks.num_tasks()
        )));
    }
    policies
        .iter()
        .enumerate()
        .map(|(m, policy)| {
            if policy.len() != contexts.num_contexts() {
                return Err(Error::InvalidShape("policy does not cover every context".into()));
            }
            let theta = instance.tasks.theta(m)?;
            let mut total = 0.0;
            for (s, (&p, &a)) in contexts.distribution().iter().zip(policy).enumerate() {
                let row = &contexts.features()[s];
                let best = row.iter().map(|phi| phi.dot(theta)).fold(f64::NEG_INFINITY, f64::max);
                let chosen = contexts.feature(s, a)?.dot(theta);
                total += p * (best - chosen);
            }
            Ok(total)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpiResult {
    pub policy: PolicyEstimate,
    pub suboptimality: Vec<f64>,
    pub samples_total: u64,
    pub audited_pulls: u64,
    pub context_samples: usize,
    pub batch_size: usize,
    pub rounds: usize,
    pub reward_free_steps: usize,
    pub nu_hat: f64,
    pub sin_theta: Option<f64>,
    pub jitter_fallbacks: usize,
}

impl BpiResult {
    pub fn max_suboptimality(&self) -> f64 {
        self.suboptimality.iter().cloned().fold(0.0, f64::max)
    }
}

/// C-DouExpDes: estimate the context distribution, plan an E-optimal action
/// batch under the estimate, recover the shared subspace from two independent
/// passes per round, then explore reward-free inside it.
pub fn c_dou_exp_des(instance: &ContextualInstance, cfg: &RunConfig) -> Result<BpiResult> {
    cfg.validate()?;
    let contexts = &instance.contexts;
    let nu_hat = contexts.nu_hat();
    if !(nu_hat > 1e-12) {
        return Err(Error::Assumption3Violated(nu_hat));
    }
    let env = ContextualEnvironment::new(instance);
    let streams = Streams::new(cfg.seed);
    let tasks = instance.tasks.num_tasks();
    let k = instance.tasks.rank();
    let l_w = instance.tasks.norm_bound();

    let t0 = context_samples(contexts, cfg);
    let (empirical, t0_used) = estimate_context_distribution(&env, t0, &streams)?;
    let e_design = design::solve_e_optimal(&empirical.moments)?;

    let n = reward_free_samples(k, l_w, cfg.delta, cfg);
    let rounds = recovery_rounds(k, contexts.norm_bound(), l_w, tasks, cfg);
    let p = action_batch_size(contexts, tasks, rounds, cfg);
    let batch = rounding::round(&empirical.moments, &e_design, cfg.zeta, p, Criterion::E, cfg.scale_round)?;

    let recovery = c_feat_recover(&env, &batch, rounds, k, &streams)?;
    let basis = recovery.estimate.basis;
    let (policy, rf_used) = est_low_rep(&env, n, cfg.gamma, &basis, &streams)?;

    let sin_theta = if k < contexts.dim() {
        Some(subspace::sin_theta(&basis, instance.tasks.extractor())?)
    } else {
        None
    };
    let suboptimality = evaluate_policy_suboptimality(instance, &policy.policies)?;
    let samples_total = t0_used + recovery.samples_used + rf_used;
    let audited_pulls = env.pulls();
    assert_eq!(audited_pulls, samples_total, "pull audit mismatch");
    Ok(BpiResult {
        policy,
        suboptimality,
        samples_total,
        audited_pulls,
        context_samples: t0,
        batch_size: p,
        rounds,
        reward_free_steps: n,
        nu_hat,
        sin_theta,
        jitter_fallbacks: recovery.jitter_fallbacks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_values() {
        let cfg = RunConfig::default();
        // (4 + 2) / 0.01 * ln(2 / 0.0005)^4
        let expected = (600.0 * 4000f64.ln().powi(4)).ceil() as usize;
        assert_eq!(reward_free_samples(2, 1.0, 0.005, &cfg), expected);
        // 1.21 * 16 / (50 * 0.01 * 0.01)
        assert_eq!(recovery_rounds(2, 1.0, 1.0, 50, &cfg), 3872);
        let tiny = RunConfig {
            scale_t: 1e-9,
            ..cfg
        };
        assert_eq!(recovery_rounds(2, 1.0, 1.0, 50, &tiny), 1);
    }

    #[test]
    fn learner_starts_at_zero() {
        let learner = RewardFreeLearner::new(DMatrix::identity(3, 2), 1.0);
        assert_eq!(learner.estimate(), DVector::zeros(3));
        assert_eq!(learner.steps(), 0);
    }

    #[test]
    fn one_dimensional_ridge_shrinkage() {
        let basis = DMatrix::from_column_slice(1, 1, &[1.0]);
        let mut learner = RewardFreeLearner::new(basis, 1.0);
        let phi = DVector::from_vec(vec![1.0]);
        for _ in 0..100 {
            learner.update(&phi, 0.7);
        }
        assert!((learner.estimate()[0] - 0.7 * 100.0 / 101.0).abs() < 1e-12);
        let inv = learner.sigma_inv.clone();
        let exact = linalg::spd_inverse(learner.sigma()).unwrap();
        assert!((inv - exact).norm() < 1e-12);
    }
}
