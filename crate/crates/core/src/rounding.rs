//! Rounding a continuous design into a discrete batch of `N` samples.
//!
//! Counts come from largest-remainder apportionment of `N * lambda`. If the
//! resulting batch misses the `(1 + zeta)` guarantee, greedy single-unit moves
//! between items are tried until it holds or the move budget runs out.

use nalgebra::{DMatrix, DVector};

use crate::design::{self, Design};
use crate::error::{Error, Result};
use crate::linalg;

/// Which criterion the rounded batch has to preserve.
#[derive(Debug, Clone, Copy)]
pub enum Criterion<'a> {
    E,
    /// Worst-case prediction variance over these targets.
    G(&'a [DVector<f64>]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundedBatch {
    /// Item indices, in index order with equal items contiguous.
    pub sequence: Vec<usize>,
    pub counts: Vec<usize>,
    /// `||(sum S)^{-1}|| / ||(N A(lambda))^{-1}||`.
    pub realized_factor_e: f64,
    /// Same ratio for the worst-case prediction variance; only for G rounding.
    pub realized_factor_g: Option<f64>,
}

impl RoundedBatch {
    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }
}

/// Smallest admissible batch: `ceil(scale_round * 180 d' / zeta^2)`.
pub fn min_batch_size(dim: usize, zeta: f64, scale_round: f64) -> usize {
    (scale_round * 180.0 * dim as f64 / (zeta * zeta)).ceil().max(1.0) as usize
}

/// Largest-remainder apportionment of `n * weights`; ties go to the lowest index.
pub fn apportion(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&i, &j| {
        let (ri, rj) = (quotas[i] - quotas[i].floor(), quotas[j] - quotas[j].floor());
        rj.total_cmp(&ri).then(i.cmp(&j))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn batch_matrix(items: &[DMatrix<f64>], counts: &[usize]) -> DMatrix<f64> {
    let w: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    design::covariance(&w, items)
}

/// E factor of integer counts against the scaled continuous design.
pub fn realized_factor_e(items: &[DMatrix<f64>], counts: &[usize], weights: &[f64]) -> f64 {
    let n: usize = counts.iter().sum();
    let reference = linalg::min_eigenvalue(&design::covariance(weights, items)) * n as f64;
    let rounded = linalg::min_eigenvalue(&batch_matrix(items, counts));
    if rounded <= linalg::SINGULAR_TOL * reference.abs() {
        return f64::INFINITY;
    }
    reference / rounded
}

fn worst_variance(a: &DMatrix<f64>, targets: &[DVector<f64>]) -> f64 {
    design::range_prediction_variance(a, targets).unwrap_or(f64::INFINITY)
}

/// G factor of integer counts against the scaled continuous design. A
/// singular batch is fine when it still covers every target direction.
pub fn realized_factor_g(
    items: &[DMatrix<f64>],
    counts: &[usize],
    weights: &[f64],
    targets: &[DVector<f64>],
) -> f64 {
    let n: usize = counts.iter().sum();
    let reference = worst_variance(&(design::covariance(weights, items) * n as f64), targets);
    let rounded = worst_variance(&batch_matrix(items, counts), targets);
    if reference == 0.0 {
        return if rounded == 0.0 { 1.0 } else { f64::INFINITY };
    }
    rounded / reference
}

/// Rounds `design` over `items` into `n` samples, certifying the
/// `(1 + zeta)` factor for `criterion`.
pub fn round(
    items: &[DMatrix<f64>],
    design: &Design,
    zeta: f64,
    n: usize,
    criterion: Criterion<'_>,
    scale_round: f64,
) -> Result<RoundedBatch> {
    if items.is_empty() || items.len() != design.weights.len() {
        return Err(Error::InvalidShape(format!(
            "{} items for {} design weights",
            items.len(),
            design.weights.len()
        )));
    }
    let dim = items[0].nrows();
    let required = min_batch_size(dim, zeta, scale_round);
    if n < required {
        return Err(Error::NTooSmall { required, got: n });
    }
    if !linalg::is_positive_definite(&design::covariance(&design.weights, items)) {
        return Err(Error::SingularCovariance);
    }

    let weights = &design.weights;
    let factor = |c: &[usize]| match criterion {
        Criterion::E => realized_factor_e(items, c, weights),
        Criterion::G(targets) => realized_factor_g(items, c, weights, targets),
    };
    let bound = 1.0 + zeta;
    let mut counts = apportion(weights, n);
    let mut current = factor(&counts);

    let budget = 10 * items.len();
    let mut moves = 0;
    while current > bound && moves < budget {
        let mut best: Option<(usize, usize, f64)> = None;
        for from in 0..items.len() {
            if counts[from] == 0 {
                continue;
            }
            for to in 0..items.len() {
                if to == from {
                    continue;
                }
                counts[from] -= 1;
                counts[to] += 1;
                let f = factor(&counts);
                counts[from] += 1;
                counts[to] -= 1;
                if f < best.map_or(current, |b| b.2) {
                    best = Some((from, to, f));
                }
            }
        }
        let Some((from, to, f)) = best else {
            break;
        };
        counts[from] -= 1;
        counts[to] += 1;
        current = f;
        moves += 1;
    }
    if current > bound {
        return Err(Error::RoundingFailed {
            factor: current,
            bound,
        });
    }

    let realized_factor_e = match criterion {
        Criterion::E => current,
        Criterion::G(_) => realized_factor_e(items, &counts, weights),
    };
    let realized_factor_g = match criterion {
        Criterion::E => None,
        Criterion::G(_) => Some(current),
    };
    let sequence = counts
        .iter()
        .enumerate()
        .flat_map(|(i, &c)| std::iter::repeat_n(i, c))
        .collect();
    Ok(RoundedBatch {
        sequence,
        counts,
        realized_factor_e,
        realized_factor_g,
    })
}
