//! Independent single-task baselines, built from the same subroutines as the
//! multi-task algorithms with the identity in place of a learned basis.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::model::{ContextualEnvironment, ContextualInstance, Environment, LinearInstance, RunConfig};
use crate::repbai::{self, BaiResult};
use crate::repbpi::{self, BpiResult};
use crate::rng::Streams;

/// Phased G-optimal elimination in the full dimension, every task on its own
/// with confidence `delta / M`.
pub fn ind_rage(instance: &LinearInstance, cfg: &RunConfig) -> Result<BaiResult> {
    cfg.validate()?;
    let env = Environment::new(instance);
    let streams = Streams::new(cfg.seed);
    let d = instance.arms.dim();
    let per_task = cfg.delta / instance.tasks.num_tasks() as f64;
    let identity = DMatrix::identity(d, d);
    let (answers, phases, capped, total) =
        repbai::phased_elimination(&env, cfg, &streams, per_task, 1, |_| {
            Ok((identity.clone(), 0, 0, None))
        })?;
    repbai::finish(&env, answers, phases, capped, total, None, 0)
}

/// Reward-free exploration in the full dimension, every task on its own with
/// `N = ceil(scale_N (d^2 + gamma d L^2) / eps^2 log^4(gamma d L / (eps delta / M)))` steps.
pub fn ind_rf_linucb(instance: &ContextualInstance, cfg: &RunConfig) -> Result<BpiResult> {
    cfg.validate()?;
    let env = ContextualEnvironment::new(instance);
    let streams = Streams::new(cfg.seed);
    let contexts = &instance.contexts;
    let d = contexts.dim();
    let per_task = cfg.delta / instance.tasks.num_tasks() as f64;
    let n = repbpi::reward_free_samples(d, instance.tasks.norm_bound(), per_task, cfg);
    let identity = DMatrix::identity(d, d);
    let (policy, used) = repbpi::est_low_rep(&env, n, cfg.gamma, &identity, &streams)?;
    let suboptimality = repbpi::evaluate_policy_suboptimality(instance, &policy.policies)?;
    let audited_pulls = env.pulls();
    assert_eq!(audited_pulls, used, "pull audit mismatch");
    Ok(BpiResult {
        policy,
        suboptimality,
        samples_total: used,
        audited_pulls,
        context_samples: 0,
        batch_size: 0,
        rounds: 0,
        reward_free_steps: n,
        nu_hat: contexts.nu_hat(),
        sin_theta: None,
        jitter_fallbacks: 0,
    })
}
