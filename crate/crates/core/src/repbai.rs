//! Multi-task best-arm identification: DouExpDes and its elimination step.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::design;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Environment, LinearInstance, RunConfig};
use crate::rng::{stage, Streams};
use crate::rounding::{self, Criterion};
use crate::subspace::{self, feat_recover};

/// Confidence of phase `t`: `delta / (2 t^2)`.
pub fn phase_delta(delta: f64, t: usize) -> f64 {
    delta / (2.0 * (t * t) as f64)
}

/// Size of the fixed exploration batch: `ceil(scale_p * 180 d / zeta^2)`.
pub fn batch_size(dim: usize, cfg: &RunConfig) -> usize {
    (cfg.scale_p * 180.0 * dim as f64 / (cfg.zeta * cfg.zeta))
        .ceil()
        .max(1.0) as usize
}

/// Inputs of the per-phase recovery budget that do not change across phases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryScale {
    pub rho_e: f64,
    pub rank: usize,
    pub arm_norm: f64,
    pub prediction_norm: f64,
    pub tasks: usize,
}

/// Rounds of feature recovery in phase `t`:
/// `ceil(scale_T (1+zeta)^3 rho_E^2 k^4 L_x^4 L_w^4 / M * max(4^t, L_x^4 / omega^2))`.
pub fn phase_rounds(t: usize, s: &RecoveryScale, cfg: &RunConfig) -> usize {
    let lx4 = s.arm_norm.powi(4);
    let base = (1.0 + cfg.zeta).powi(3)
        * s.rho_e
        * s.rho_e
        * (s.rank as f64).powi(4)
        * lx4
        * s.prediction_norm.powi(4)
        / s.tasks as f64;
    let growth = 4f64.powi(t as i32).max(lx4 / (cfg.omega_floor * cfg.omega_floor));
    (cfg.scale_t * base * growth).ceil().max(1.0) as usize
}

/// Elimination samples for one task in phase `t`:
/// `max(scale_N 32 (1+zeta) 4^t rho_G log(4 n^2 M / delta_t), rounding minimum)`.
pub fn elimination_samples(
    t: usize,
    rho_g: f64,
    n_arms: usize,
    union_size: usize,
    delta_t: f64,
    reduced_dim: usize,
    cfg: &RunConfig,
) -> usize {
    let log_term = (4.0 * (n_arms * n_arms * union_size) as f64 / delta_t).ln();
    let budget = cfg.scale_n * 32.0 * (1.0 + cfg.zeta) * 4f64.powi(t as i32) * rho_g * log_term;
    let floor = rounding::min_batch_size(reduced_dim, cfg.zeta, cfg.scale_round);
    (budget.ceil() as usize).max(floor)
}

/// What one task did in one elimination step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskStep {
    pub samples: usize,
    /// `None` for tasks already down to one candidate.
    pub rho_g: Option<f64>,
    /// `max_y |y^T (theta_hat - theta)|` over the candidate differences (ground truth, diagnostics only).
    pub max_error: Option<f64>,
    /// Estimated reward vector, if the task was sampled.
    #[serde(skip)]
    pub theta_hat: Option<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EliminationOutcome {
    pub candidates: Vec<Vec<usize>>,
    pub samples_used: u64,
    pub steps: Vec<TaskStep>,
}

/// Parameters of one elimination step shared by all tasks.
#[derive(Debug, Clone, Copy)]
pub struct EliminationParams<'a> {
    pub phase: usize,
    pub delta_t: f64,
    /// Tasks covered by the union bound inside the log term.
    pub union_size: usize,
    pub basis: &'a DMatrix<f64>,
}

/// One phase of low-dimensional elimination for every task: G-optimal design
/// over the projected arms, rounding, least squares in the reduced space and
/// removal of arms that are beaten by more than `2^{-t}`.
pub fn eli_low_rep(
    env: &Environment<'_>,
    candidates: &[Vec<usize>],
    params: EliminationParams<'_>,
    cfg: &RunConfig,
    streams: &Streams,
) -> Result<EliminationOutcome> {
    let instance = env.instance();
    let arms = instance.arms.arms();
    let basis = params.basis;
    if basis.nrows() != instance.arms.dim() {
        return Err(Error::ShapeMismatch(format!(
            "basis has {} rows for arms in R^{}",
            basis.nrows(),
            instance.arms.dim()
        )));
    }
    if candidates.iter().any(|c| c.is_empty()) {
        return Err(Error::InvalidShape("empty candidate set".into()));
    }
    let reduced: Vec<DVector<f64>> = arms.iter().map(|x| basis.tr_mul(x)).collect();
    let reduced_outer: Vec<DMatrix<f64>> = reduced.iter().map(|z| z * z.transpose()).collect();
    let threshold = 0.5f64.powi(params.phase as i32);

    let results: Vec<(Vec<usize>, TaskStep)> = candidates
        .par_iter()
        .enumerate()
        .map(|(m, cand)| {
            if cand.len() == 1 {
                return Ok((
                    cand.clone(),
                    TaskStep {
                        samples: 0,
                        rho_g: None,
                        max_error: None,
                        theta_hat: None,
                    },
                ));
            }
            let mut targets = Vec::with_capacity(cand.len() * (cand.len() - 1));
            for &i in cand {
                for &j in cand {
                    if i != j {
                        targets.push(&reduced[i] - &reduced[j]);
                    }
                }
            }
            let g = design::solve_g_optimal(&reduced, &targets).map_err(|e| match e {
                Error::RankDeficient { .. } | Error::SingularCovariance => Error::SingularReducedGram,
                other => other,
            })?;
            let n = elimination_samples(
                params.phase,
                g.objective_value,
                arms.len(),
                params.union_size,
                params.delta_t,
                basis.ncols(),
                cfg,
            );
            let batch = rounding::round(&reduced_outer, &g, cfg.zeta, n, Criterion::G(&targets), cfg.scale_round)?;

            let mut rng = streams.stream(&[stage::ELIMINATION, params.phase as u64, m as u64]);
            let k = basis.ncols();
            let mut gram = DMatrix::zeros(k, k);
            let mut b = DVector::zeros(k);
            for (i, &c) in batch.counts.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let sum = env.pull_many(m, i, c, &mut rng)?;
                gram += &reduced_outer[i] * c as f64;
                b.axpy(sum, &reduced[i], 1.0);
            }
            // a batch concentrated on the candidates may leave directions unobserved
            let w_hat = match linalg::spd_solve(&gram, &b) {
                Some(w) => w,
                None => linalg::psd_pseudo_inverse(&gram, 1e-12).0 * b,
            };
            let theta_hat = basis * w_hat;

            let scores: Vec<f64> = cand.iter().map(|&i| arms[i].dot(&theta_hat)).collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let kept: Vec<usize> = cand
                .iter()
                .zip(&scores)
                .filter(|(_, s)| !(top - **s > threshold))
                .map(|(i, _)| *i)
                .collect();
            assert!(!kept.is_empty(), "the leading arm cannot eliminate itself");

            let theta = instance.tasks.theta(m)?;
            let err = &theta_hat - theta;
            let mut max_error = 0.0f64;
            for &i in cand {
                for &j in cand {
                    max_error = max_error.max((&arms[i] - &arms[j]).dot(&err).abs());
                }
            }
            Ok((
                kept,
                TaskStep {
                    samples: n,
                    rho_g: Some(g.objective_value),
                    max_error: Some(max_error),
                    theta_hat: Some(theta_hat),
                },
            ))
        })
        .collect::<Result<_>>()?;

    let samples_used = results.iter().map(|(_, s)| s.samples as u64).sum();
    let (candidates, steps) = results.into_iter().unzip();
    Ok(EliminationOutcome {
        candidates,
        samples_used,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseLog {
    pub phase: usize,
    pub delta_t: f64,
    /// Feature-recovery rounds `T_t` (0 when the phase has no recovery step).
    pub rounds: usize,
    pub candidates_before: Vec<usize>,
    pub candidates_after: Vec<usize>,
    pub elimination_samples: Vec<usize>,
    pub rho_g: Vec<Option<f64>>,
    pub sin_theta: Option<f64>,
    pub spectral_gap: Option<f64>,
    pub max_error: Vec<Option<f64>>,
    /// False if some task lost its best arm although its estimates were within `2^{-t}`.
    pub retention_ok: bool,
    pub cumulative_samples: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaiResult {
    pub answers: Vec<usize>,
    pub success: Vec<bool>,
    pub samples_total: u64,
    pub phases: Vec<PhaseLog>,
    pub phase_cap_reached: bool,
    pub rho_e: Option<f64>,
    pub batch_size: usize,
    /// Pulls counted by the environment; always equals `samples_total`.
    pub audited_pulls: u64,
}

impl BaiResult {
    pub fn all_correct(&self) -> bool {
        self.success.iter().all(|s| *s)
    }
}

/// Phase loop shared by DouExpDes and the independent baseline. `recover`
/// supplies the basis for phase `t` and returns the samples it spent.
pub(crate) fn phased_elimination(
    env: &Environment<'_>,
    cfg: &RunConfig,
    streams: &Streams,
    confidence: f64,
    union_size: usize,
    mut recover: impl FnMut(usize) -> Result<(DMatrix<f64>, u64, usize, Option<f64>)>,
) -> Result<(Vec<usize>, Vec<PhaseLog>, bool, u64)> {
    let instance = env.instance();
    let tasks = instance.tasks.num_tasks();
    let truth = instance.tasks.extractor();
    let best: Vec<usize> = (0..tasks).map(|m| instance.best_arm(m)).collect::<Result<_>>()?;
    let mut candidates: Vec<Vec<usize>> = vec![(0..instance.arms.len()).collect(); tasks];
    let mut leaders: Vec<usize> = vec![0; tasks];
    let mut phases = Vec::new();
    let mut total = 0u64;
    let mut capped = true;

    for t in 1..=cfg.max_phases {
        let delta_t = phase_delta(confidence, t);
        let (basis, recovery_samples, rounds, gap) = recover(t)?;
        total += recovery_samples;
        let params = EliminationParams {
            phase: t,
            delta_t,
            union_size,
            basis: &basis,
        };
        let outcome = eli_low_rep(env, &candidates, params, cfg, streams)?;
        total += outcome.samples_used;

        let mut retention_ok = true;
        for (m, step) in outcome.steps.iter().enumerate() {
            if let (Some(err), Some(theta_hat)) = (step.max_error, &step.theta_hat) {
                if err <= 0.5f64.powi(t as i32) && !outcome.candidates[m].contains(&best[m]) {
                    retention_ok = false;
                }
                let arms = instance.arms.arms();
                leaders[m] = *outcome.candidates[m]
                    .iter()
                    .max_by(|&&i, &&j| {
                        arms[i].dot(theta_hat).total_cmp(&arms[j].dot(theta_hat)).then(j.cmp(&i))
                    })
                    .expect("candidate sets are never empty");
            }
            if outcome.candidates[m].len() == 1 {
                leaders[m] = outcome.candidates[m][0];
            }
        }
        let sin_theta = if basis.ncols() == truth.ncols() && basis.ncols() < basis.nrows() {
            Some(subspace::sin_theta(&basis, truth)?)
        } else {
            None
        };
        phases.push(PhaseLog {
            phase: t,
            delta_t,
            rounds,
            candidates_before: candidates.iter().map(Vec::len).collect(),
            candidates_after: outcome.candidates.iter().map(Vec::len).collect(),
            elimination_samples: outcome.steps.iter().map(|s| s.samples).collect(),
            rho_g: outcome.steps.iter().map(|s| s.rho_g).collect(),
            sin_theta,
            spectral_gap: gap,
            max_error: outcome.steps.iter().map(|s| s.max_error).collect(),
            retention_ok,
            cumulative_samples: total,
        });
        candidates = outcome.candidates;
        if candidates.iter().all(|c| c.len() == 1) {
            capped = false;
            break;
        }
    }
    Ok((leaders, phases, capped, total))
}

/// DouExpDes: one E-optimal batch for the whole run, then phases of feature
/// recovery followed by low-dimensional elimination until every task is down
/// to a single arm.
pub fn dou_exp_des(instance: &LinearInstance, cfg: &RunConfig) -> Result<BaiResult> {
    cfg.validate()?;
    let env = Environment::new(instance);
    let streams = Streams::new(cfg.seed);
    let arms = &instance.arms;
    let k = instance.tasks.rank();

    let items = arms.outer_products();
    let e_design = design::solve_e_optimal(&items)?;
    let p = batch_size(arms.dim(), cfg);
    let batch = rounding::round(&items, &e_design, cfg.zeta, p, Criterion::E, cfg.scale_round)?;
    let scale = RecoveryScale {
        rho_e: e_design.objective_value,
        rank: k,
        arm_norm: arms.norm_bound(),
        prediction_norm: instance.tasks.norm_bound(),
        tasks: instance.tasks.num_tasks(),
    };

    let recover = |t: usize| {
        let rounds = phase_rounds(t, &scale, cfg);
        let rec = feat_recover(&env, &batch, rounds, k, &streams, t as u64, cfg.bias_correction)?;
        Ok((
            rec.estimate.basis,
            rec.samples_used,
            rounds,
            Some(rec.estimate.spectral_gap),
        ))
    };
    let (answers, phases, capped, total) =
        phased_elimination(&env, cfg, &streams, cfg.delta, scale.tasks, recover)?;
    finish(&env, answers, phases, capped, total, Some(scale.rho_e), p)
}

pub(crate) fn finish(
    env: &Environment<'_>,
    answers: Vec<usize>,
    phases: Vec<PhaseLog>,
    phase_cap_reached: bool,
    samples_total: u64,
    rho_e: Option<f64>,
    batch_size: usize,
) -> Result<BaiResult> {
    let instance = env.instance();
    let success = answers
        .iter()
        .enumerate()
        .map(|(m, a)| Ok(!phase_cap_reached && instance.best_arm(m)? == *a))
        .collect::<Result<_>>()?;
    let audited_pulls = env.pulls();
    assert_eq!(audited_pulls, samples_total, "pull audit mismatch");
    Ok(BaiResult {
        answers,
        success,
        samples_total,
        phases,
        phase_cap_reached,
        rho_e,
        batch_size,
        audited_pulls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_delta_schedule_sums_below_delta() {
        let total: f64 = (1..10_000).map(|t| phase_delta(0.005, t)).sum();
        assert!(total < 0.005);
        assert!((phase_delta(0.005, 1) - 0.0025).abs() < 1e-15);
    }

    #[test]
    fn elimination_floor_is_rounding_minimum() {
        let cfg = RunConfig {
            scale_n: 1e-9,
            ..RunConfig::default()
        };
        assert_eq!(elimination_samples(1, 4.0, 5, 50, 0.0025, 2, &cfg), 36_000);
    }

    #[test]
    fn phase_rounds_formula() {
        let cfg = RunConfig::default();
        let s = RecoveryScale {
            rho_e: 5.0,
            rank: 2,
            arm_norm: 1.0,
            prediction_norm: 1.0,
            tasks: 50,
        };
        // 1.1^3 * 25 * 16 / 50 * max(4, 100)
        assert_eq!(phase_rounds(1, &s, &cfg), (1.331f64 * 25.0 * 16.0 / 50.0 * 100.0).ceil() as usize);
        assert_eq!(phase_rounds(4, &s, &cfg), (1.331f64 * 8.0 * 256.0).ceil() as usize);
    }
}
