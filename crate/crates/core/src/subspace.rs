//! Shared-subspace recovery from batched per-task least-squares estimates.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ContextualEnvironment, Environment};
use crate::rng::{stage, Streams};
use crate::rounding::RoundedBatch;

/// Estimated orthonormal basis plus the spectrum it was cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceEstimate {
    /// `d x k`, orthonormal columns.
    pub basis: DMatrix<f64>,
    /// All `d` singular values of the moment matrix, descending.
    pub singular_values: Vec<f64>,
    /// `sigma_k - sigma_{k+1}`.
    pub spectral_gap: f64,
}

impl SubspaceEstimate {
    pub fn from_moment(z: &DMatrix<f64>, k: usize) -> Result<Self> {
        let d = z.nrows();
        if z.ncols() != d || k == 0 || k > d {
            return Err(Error::InvalidShape(format!(
                "rank {k} subspace of a {}x{} moment matrix",
                z.nrows(),
                z.ncols()
            )));
        }
        let (basis, singular_values) = linalg::top_left_singular(z, k);
        let next = singular_values.get(k).copied().unwrap_or(0.0);
        let spectral_gap = singular_values[k - 1] - next;
        Ok(Self {
            basis,
            singular_values,
            spectral_gap,
        })
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentMatrix {
    pub z: DMatrix<f64>,
    pub tasks: usize,
    pub rounds: usize,
    pub bias_corrected: bool,
}

/// Output of one recovery pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    pub estimate: SubspaceEstimate,
    pub moment: MomentMatrix,
    pub samples_used: u64,
    /// Rounds whose realized Gram needed the ridge fallback.
    pub jitter_fallbacks: usize,
}

/// `||(I - B_hat B_hat^T) B||`, the sine of the largest principal angle.
pub fn sin_theta(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if estimate.shape() != truth.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            estimate.shape(),
            truth.shape()
        )));
    }
    let d = truth.nrows();
    let residual = (DMatrix::identity(d, d) - estimate * estimate.transpose()) * truth;
    Ok(linalg::spectral_norm(&residual))
}

/// Gram matrix `sum_i x_i x_i^T` of a batch over arm vectors.
pub fn batch_gram(arms: &[DVector<f64>], counts: &[usize]) -> DMatrix<f64> {
    let d = arms[0].len();
    let mut g = DMatrix::zeros(d, d);
    for (x, &c) in arms.iter().zip(counts) {
        if c > 0 {
            g.ger(c as f64, x, x, 1.0);
        }
    }
    g
}

/// Moment-based recovery for the linear setting: every task samples the whole
/// batch `rounds` times, each pass giving `theta_tilde = G^{-1} sum x r`, and
/// `Z = mean(theta_tilde theta_tilde^T) - G^{-1}` (the correction term is
/// dropped when `bias_correction` is false).
pub fn feat_recover(
    env: &Environment<'_>,
    batch: &RoundedBatch,
    rounds: usize,
    k: usize,
    streams: &Streams,
    phase: u64,
    bias_correction: bool,
) -> Result<Recovery> {
    let instance = env.instance();
    let arms = instance.arms.arms();
    let tasks = instance.tasks.num_tasks();
    let d = instance.arms.dim();
    if batch.counts.len() != arms.len() {
        return Err(Error::InvalidShape("batch does not match the arm set".into()));
    }
    if rounds == 0 {
        return Err(Error::Config("feature recovery needs at least one round".into()));
    }
    let gram = batch_gram(arms, &batch.counts);
    let gram_inv = linalg::spd_inverse(&gram).ok_or(Error::SingularBatch)?;
    let support: Vec<(usize, usize)> = batch
        .counts
        .iter()
        .enumerate()
        .filter(|(_, c)| **c > 0)
        .map(|(i, c)| (i, *c))
        .collect();

    let per_task: Vec<DMatrix<f64>> = (0..tasks)
        .into_par_iter()
        .map(|m| {
            let mut acc = DMatrix::zeros(d, d);
            for j in 0..rounds {
                let mut rng = streams.stream(&[stage::BATCH_FEATURES, phase, m as u64, j as u64]);
                let mut b = DVector::zeros(d);
                for &(i, c) in &support {
                    let sum = env.pull_many(m, i, c, &mut rng)?;
                    b.axpy(sum, &arms[i], 1.0);
                }
                let theta = &gram_inv * b;
                acc.ger(1.0, &theta, &theta, 1.0);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;

    let mut z = DMatrix::zeros(d, d);
    for acc in &per_task {
        z += acc;
    }
    z /= (tasks * rounds) as f64;
    if bias_correction {
        z -= &gram_inv;
    }
    let z = linalg::symmetrize(&z);
    let estimate = SubspaceEstimate::from_moment(&z, k)?;
    Ok(Recovery {
        estimate,
        moment: MomentMatrix {
            z,
            tasks,
            rounds,
            bias_corrected: bias_correction,
        },
        samples_used: (tasks * rounds * batch.len()) as u64,
        jitter_fallbacks: 0,
    })
}

/// Least squares on one pass of realized context-action features, with one
/// ridge-jitter retry. Returns the estimate and whether jitter was needed.
fn realized_least_squares(gram: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
    let d = gram.nrows();
    let (values, _) = linalg::sym_eigen(gram);
    let top = values[d - 1];
    let well_posed = top > 0.0 && values[0] > top / linalg::MAX_CONDITION;
    if well_posed {
        if let Some(x) = linalg::spd_solve(gram, b) {
            return Ok((x, false));
        }
    }
    let jitter = 1e-8 * gram.trace() / d as f64;
    if !(jitter > 0.0) {
        return Err(Error::SingularRealizedGram);
    }
    let ridged = gram + DMatrix::identity(d, d) * jitter;
    linalg::spd_solve(&ridged, b)
        .map(|x| (x, true))
        .ok_or(Error::SingularRealizedGram)
}

/// Contextual recovery: per task and round, two independent passes over the
/// action batch, each with freshly observed contexts, and
/// `Z = mean(theta_tilde_1 theta_tilde_2^T)`.
pub fn c_feat_recover(
    env: &ContextualEnvironment<'_>,
    batch: &RoundedBatch,
    rounds: usize,
    k: usize,
    streams: &Streams,
) -> Result<Recovery> {
    let instance = env.instance();
    let contexts = &instance.contexts;
    let tasks = instance.tasks.num_tasks();
    let d = contexts.dim();
    if batch.counts.len() != contexts.num_actions() {
        return Err(Error::InvalidShape("batch does not match the action set".into()));
    }
    if rounds == 0 {
        return Err(Error::Config("feature recovery needs at least one round".into()));
    }

    let per_task: Vec<(DMatrix<f64>, usize)> = (0..tasks)
        .into_par_iter()
        .map(|m| {
            let mut acc = DMatrix::zeros(d, d);
            let mut fallbacks = 0;
            for j in 0..rounds {
                let mut pass = |replica: u64| -> Result<DVector<f64>> {
                    let mut rng = streams.stream(&[
                        stage::CONTEXT_FEATURES,
                        m as u64,
                        j as u64,
                        replica,
                    ]);
                    let mut gram = DMatrix::zeros(d, d);
                    let mut b = DVector::zeros(d);
                    for &a in &batch.sequence {
                        let s = env.observe_context(&mut rng);
                        let r = env.act(m, s, a, &mut rng)?;
                        let phi = contexts.feature(s, a)?;
                        gram.ger(1.0, phi, phi, 1.0);
                        b.axpy(r, phi, 1.0);
                    }
                    let (theta, jittered) = realized_least_squares(&gram, &b)?;
                    if jittered {
                        fallbacks += 1;
                    }
                    Ok(theta)
                };
                let first = pass(1)?;
                let second = pass(2)?;
                acc.ger(1.0, &first, &second, 1.0);
            }
            Ok((acc, fallbacks))
        })
        .collect::<Result<_>>()?;

    let mut z = DMatrix::zeros(d, d);
    let mut jitter_fallbacks = 0;
    for (acc, f) in &per_task {
        z += acc;
        jitter_fallbacks += f;
    }
    z /= (tasks * rounds) as f64;
    let estimate = SubspaceEstimate::from_moment(&z, k)?;
    Ok(Recovery {
        estimate,
        moment: MomentMatrix {
            z,
            tasks,
            rounds,
            bias_corrected: false,
        },
        samples_used: (2 * tasks * rounds * batch.len()) as u64,
        jitter_fallbacks,
    })
}
