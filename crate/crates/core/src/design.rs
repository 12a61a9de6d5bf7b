//! Continuous optimal experimental design over a finite item set.
//!
//! Both criteria are written as `optimize t` subject to a convex constraint
//! family (`A(lambda) >= t I` for E, `||y||^2_{A^{-1}} <= t` for G) and solved
//! by following the log-barrier central path with Newton steps. Each centered
//! point yields a dual bound, so the returned design carries a certified
//! relative optimality gap.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Relative duality-gap tolerance for `converged`.
    pub tol: f64,
    /// Cap on total Newton steps.
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iter: 2_000,
        }
    }
}

/// A probability vector over items and its induced covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub weights: Vec<f64>,
    /// `A(lambda) = sum_i lambda_i Q_i`.
    pub covariance: DMatrix<f64>,
    /// `1 / sigma_min(A)` for E designs, `max_y ||y||^2_{A^{-1}}` for G designs.
    pub objective_value: f64,
    /// `(upper - lower) / upper` between the primal value and the best dual bound.
    pub certificate_gap: f64,
    /// False when the gap was still above tolerance at the iteration cap.
    pub converged: bool,
    pub iterations: usize,
    /// Incumbent objective after every centering pass (non-worsening).
    pub trace: Vec<f64>,
}

/// `sum_i w_i Q_i`.
pub fn covariance(weights: &[f64], items: &[DMatrix<f64>]) -> DMatrix<f64> {
    let d = items[0].nrows();
    let mut a = DMatrix::zeros(d, d);
    for (w, q) in weights.iter().zip(items) {
        if *w != 0.0 {
            a += q * *w;
        }
    }
    a
}

/// `sum_i w_i z_i z_i^T`.
pub fn vector_covariance(weights: &[f64], items: &[DVector<f64>]) -> DMatrix<f64> {
    let d = items[0].len();
    let mut a = DMatrix::zeros(d, d);
    for (w, z) in weights.iter().zip(items) {
        if *w != 0.0 {
            a.ger(*w, z, z, 1.0);
        }
    }
    a
}

/// `max_y ||y||^2_{A^{-1}}`.
pub fn max_prediction_variance(a: &DMatrix<f64>, targets: &[DVector<f64>]) -> Result<f64> {
    let inv = linalg::spd_inverse(a).ok_or(Error::SingularCovariance)?;
    Ok(targets
        .iter()
        .map(|y| linalg::quad_form(&inv, y))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Like [`max_prediction_variance`], but a singular `a` is accepted as long as
/// every target lies in its range; variances then use the pseudo-inverse.
pub fn range_prediction_variance(a: &DMatrix<f64>, targets: &[DVector<f64>]) -> Result<f64> {
    if let Ok(v) = max_prediction_variance(a, targets) {
        return Ok(v);
    }
    let (pinv, proj) = linalg::psd_pseudo_inverse(a, RANGE_TOL);
    let mut worst = f64::NEG_INFINITY;
    for y in targets {
        if (y - &proj * y).norm() > RANGE_TOL.sqrt() * y.norm().max(1.0) {
            return Err(Error::SingularCovariance);
        }
        worst = worst.max(linalg::quad_form(&pinv, y));
    }
    Ok(worst)
}

/// Relative eigenvalue cut for [`range_prediction_variance`].
const RANGE_TOL: f64 = 1e-12;

/// Certificate for a G design: the max prediction variance at the design's
/// weights, recomputed from scratch, minus the design's reported objective.
pub fn kw_gap(design: &Design, items: &[DVector<f64>], targets: &[DVector<f64>]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::EmptyTargets);
    }
    let a = vector_covariance(&design.weights, items);
    Ok(max_prediction_variance(&a, targets)? - design.objective_value)
}

fn check_span(a: &DMatrix<f64>) -> Result<()> {
    let dim = a.nrows();
    let rank = linalg::rank(a, 1e-10);
    if rank < dim {
        return Err(Error::RankDeficient { rank, dim });
    }
    Ok(())
}

/// A self-concordant barrier over `x = (lambda_1..lambda_n, t)` restricted to
/// `sum lambda = 1`, scaled by the path parameter `tau`.
trait Barrier {
    fn num_items(&self) -> usize;
    /// `None` outside the domain.
    fn value(&self, x: &DVector<f64>, tau: f64) -> Option<f64>;
    fn derivatives(&self, x: &DVector<f64>, tau: f64) -> (DVector<f64>, DMatrix<f64>);
    /// Number of logarithmic terms, i.e. the barrier parameter.
    fn degree(&self) -> f64;
}

/// Exact inverse of a positive definite matrix, without regularization.
fn chol_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    nalgebra::Cholesky::new(linalg::symmetrize(a)).map(|c| c.inverse())
}

/// Outcome of one centering pass.
struct Centered {
    x: DVector<f64>,
    steps: usize,
}

/// Equality-constrained damped Newton method with backtracking.
fn center<B: Barrier>(b: &B, mut x: DVector<f64>, tau: f64, max_steps: usize) -> Centered {
    let n = b.num_items();
    let dim = n + 1;
    let mut steps = 0;
    while steps < max_steps {
        let (g, h) = b.derivatives(&x, tau);
        let mut kkt = DMatrix::zeros(dim + 1, dim + 1);
        kkt.view_mut((0, 0), (dim, dim)).copy_from(&h);
        for i in 0..n {
            kkt[(i, dim)] = 1.0;
            kkt[(dim, i)] = 1.0;
        }
        let mut rhs = DVector::zeros(dim + 1);
        rhs.rows_mut(0, dim).copy_from(&(-&g));
        let Some(sol) = kkt.lu().solve(&rhs) else {
            break;
        };
        let mut dx = sol.rows(0, dim).into_owned();
        let drift = dx.rows(0, n).sum() / n as f64;
        dx.rows_mut(0, n).add_scalar_mut(-drift);
        let decrement = -g.dot(&dx);
        if !(decrement > 2e-10) {
            break;
        }
        let f0 = b.value(&x, tau).unwrap_or(f64::INFINITY);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &x + &dx * step;
            if let Some(f) = b.value(&trial, tau) {
                if f < f0 && f <= f0 - 0.01 * step * decrement {
                    x = trial;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        steps += 1;
        if !accepted {
            break;
        }
    }
    Centered { x, steps }
}

/// `-tau t - log det(A(lambda) - t I) - sum log lambda_i` (E criterion).
struct EBarrier<'a> {
    qs: &'a [DMatrix<f64>],
}

impl EBarrier<'_> {
    fn slack(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.qs.len();
        let d = self.qs[0].nrows();
        let a = covariance(&x.as_slice()[..n], self.qs);
        a - DMatrix::identity(d, d) * x[n]
    }
}

impl Barrier for EBarrier<'_> {
    fn num_items(&self) -> usize {
        self.qs.len()
    }

    fn degree(&self) -> f64 {
        (self.qs.len() + self.qs[0].nrows()) as f64
    }

    fn value(&self, x: &DVector<f64>, tau: f64) -> Option<f64> {
        let n = self.qs.len();
        if x.rows(0, n).iter().any(|l| *l <= 0.0) {
            return None;
        }
        let chol = nalgebra::Cholesky::new(linalg::symmetrize(&self.slack(x)))?;
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let loglam: f64 = x.rows(0, n).iter().map(|l| l.ln()).sum();
        Some(-tau * x[n] - logdet - loglam)
    }

    fn derivatives(&self, x: &DVector<f64>, tau: f64) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.qs.len();
        let p = chol_inverse(&self.slack(x)).expect("iterate is strictly feasible");
        let pq: Vec<DMatrix<f64>> = self.qs.iter().map(|q| &p * q).collect();
        let mut g = DVector::zeros(n + 1);
        let mut h = DMatrix::zeros(n + 1, n + 1);
        let pp = &p * &p;
        for i in 0..n {
            g[i] = -pq[i].trace() - 1.0 / x[i];
            for j in 0..=i {
                let v = pq[i].component_mul(&pq[j].transpose()).sum();
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
            h[(i, i)] += 1.0 / (x[i] * x[i]);
            let cross = -(pq[i].transpose().component_mul(&p)).sum();
            h[(i, n)] = cross;
            h[(n, i)] = cross;
        }
        g[n] = -tau + p.trace();
        h[(n, n)] = pp.trace();
        (g, h)
    }
}

/// `tau t - sum_y log(t - ||y||^2_{A^{-1}}) - sum log lambda_i` (G criterion).
struct GBarrier<'a> {
    items: &'a [DVector<f64>],
    targets: &'a [DVector<f64>],
}

impl GBarrier<'_> {
    fn inverse(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let n = self.items.len();
        if x.rows(0, n).iter().any(|l| *l <= 0.0) {
            return None;
        }
        let a = vector_covariance(&x.as_slice()[..n], self.items);
        chol_inverse(&a)
    }
}

impl Barrier for GBarrier<'_> {
    fn num_items(&self) -> usize {
        self.items.len()
    }

    fn degree(&self) -> f64 {
        (self.items.len() + self.targets.len()) as f64
    }

    fn value(&self, x: &DVector<f64>, tau: f64) -> Option<f64> {
        let n = self.items.len();
        let inv = self.inverse(x)?;
        let t = x[n];
        let mut f = tau * t;
        for y in self.targets {
            let s = t - linalg::quad_form(&inv, y);
            if s <= 0.0 {
                return None;
            }
            f -= s.ln();
        }
        f -= x.rows(0, n).iter().map(|l| l.ln()).sum::<f64>();
        Some(f)
    }

    fn derivatives(&self, x: &DVector<f64>, tau: f64) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.items.len();
        let inv = self.inverse(x).expect("iterate is strictly feasible");
        let t = x[n];
        let az: Vec<DVector<f64>> = self.items.iter().map(|z| &inv * z).collect();
        let mut kernel = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.items[i].dot(&az[j]);
                kernel[(i, j)] = v;
                kernel[(j, i)] = v;
            }
        }
        let mut g = DVector::zeros(n + 1);
        let mut h = DMatrix::zeros(n + 1, n + 1);
        g[n] = tau;
        for y in self.targets {
            let c = DVector::from_iterator(n, az.iter().map(|a| a.dot(y)));
            let c2 = c.map(|v| v * v);
            let s = t - linalg::quad_form(&inv, y);
            let (s1, s2) = (1.0 / s, 1.0 / (s * s));
            for i in 0..n {
                g[i] -= c2[i] * s1;
                for j in 0..=i {
                    let v = c2[i] * c2[j] * s2 + 2.0 * s1 * kernel[(i, j)] * c[i] * c[j];
                    h[(i, j)] += v;
                    if i != j {
                        h[(j, i)] += v;
                    }
                }
                h[(i, n)] += c2[i] * s2;
                h[(n, i)] += c2[i] * s2;
            }
            g[n] -= s1;
            h[(n, n)] += s2;
        }
        for i in 0..n {
            g[i] -= 1.0 / x[i];
            h[(i, i)] += 1.0 / (x[i] * x[i]);
        }
        (g, h)
    }
}

/// Ratio between successive path parameters.
const TAU_GROWTH: f64 = 8.0;
/// Internal target for the relative certificate, well below any caller tolerance.
const INTERNAL_GAP: f64 = 1e-7;

/// E-optimal design with default options.
pub fn solve_e_optimal(items: &[DMatrix<f64>]) -> Result<Design> {
    solve_e_optimal_with(items, SolverOptions::default())
}

/// Maximizes `sigma_min(sum_i lambda_i Q_i)` over the simplex.
pub fn solve_e_optimal_with(items: &[DMatrix<f64>], opts: SolverOptions) -> Result<Design> {
    let n = items.len();
    if n == 0 {
        return Err(Error::InvalidShape("no design items".into()));
    }
    let d = items[0].nrows();
    if items.iter().any(|q| q.shape() != (d, d)) {
        return Err(Error::InvalidShape("item matrices differ in shape".into()));
    }
    let scale = items
        .iter()
        .map(linalg::spectral_norm)
        .fold(0.0, f64::max);
    if !(scale > 0.0) {
        return Err(Error::RankDeficient { rank: 0, dim: d });
    }
    let qs: Vec<DMatrix<f64>> = items.iter().map(|q| linalg::symmetrize(q) / scale).collect();
    check_span(&qs.iter().fold(DMatrix::zeros(d, d), |acc, q| acc + q))?;

    let barrier = EBarrier { qs: &qs };
    let uniform = vec![1.0 / n as f64; n];
    let sigma0 = linalg::min_eigenvalue(&covariance(&uniform, &qs));
    let mut x = DVector::from_iterator(n + 1, uniform.iter().cloned().chain([0.5 * sigma0]));
    let mut tau = barrier.degree() / sigma0;

    let mut best_lambda = uniform;
    let mut best_low = sigma0;
    let mut best_up = f64::INFINITY;
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let centered = center(&barrier, x, tau, opts.max_iter.saturating_sub(iterations).max(1));
        x = centered.x;
        iterations += centered.steps;

        let lambda: Vec<f64> = x.as_slice()[..n].to_vec();
        let a = covariance(&lambda, &qs);
        let (values, vectors) = linalg::sym_eigen(&a);
        if values[0] > best_low {
            best_low = values[0];
            best_lambda = lambda;
        }
        // dual bounds: the central-path matrix and the bottom eigenvector
        let slack = &a - DMatrix::identity(d, d) * x[n];
        if let Some(p) = chol_inverse(&slack) {
            let w = &p / p.trace();
            let up = qs.iter().map(|q| q.dot(&w)).fold(f64::NEG_INFINITY, f64::max);
            best_up = best_up.min(up);
        }
        let u = vectors.column(0).into_owned();
        let hard = qs
            .iter()
            .map(|q| linalg::quad_form(q, &u))
            .fold(f64::NEG_INFINITY, f64::max);
        best_up = best_up.min(hard);
        trace.push(1.0 / (best_low * scale));

        let gap = (best_up - best_low) / best_up;
        let exhausted = barrier.degree() / tau < 1e-12 * best_low;
        if gap <= INTERNAL_GAP || iterations >= opts.max_iter || exhausted {
            break;
        }
        tau *= TAU_GROWTH;
    }

    let covariance_unscaled = covariance(&best_lambda, items);
    let sigma = linalg::min_eigenvalue(&covariance_unscaled);
    let gap = ((best_up - best_low) / best_up).max(0.0);
    Ok(Design {
        weights: best_lambda,
        covariance: covariance_unscaled,
        objective_value: 1.0 / sigma,
        certificate_gap: gap,
        converged: gap <= opts.tol,
        iterations,
        trace,
    })
}

/// G-optimal design with default options.
pub fn solve_g_optimal(items: &[DVector<f64>], targets: &[DVector<f64>]) -> Result<Design> {
    solve_g_optimal_with(items, targets, SolverOptions::default())
}

/// Minimizes `max_y ||y||^2_{A(lambda)^{-1}}` with `A(lambda) = sum_i lambda_i z_i z_i^T`.
pub fn solve_g_optimal_with(
    items: &[DVector<f64>],
    targets: &[DVector<f64>],
    opts: SolverOptions,
) -> Result<Design> {
    let n = items.len();
    if n == 0 {
        return Err(Error::InvalidShape("no design items".into()));
    }
    if targets.is_empty() {
        return Err(Error::EmptyTargets);
    }
    let d = items[0].len();
    if items.iter().chain(targets).any(|v| v.len() != d) {
        return Err(Error::InvalidShape("items and targets differ in dimension".into()));
    }
    check_span(&vector_covariance(&vec![1.0; n], items))?;

    let uniform = vec![1.0 / n as f64; n];
    let a0 = vector_covariance(&uniform, items);
    let v0 = max_prediction_variance(&a0, targets)?;
    if v0 == 0.0 {
        return Ok(Design {
            weights: uniform,
            covariance: a0,
            objective_value: 0.0,
            certificate_gap: 0.0,
            converged: true,
            iterations: 0,
            trace: vec![],
        });
    }

    let barrier = GBarrier { items, targets };
    let mut x = DVector::from_iterator(n + 1, uniform.iter().cloned().chain([1.5 * v0]));
    let mut tau = barrier.degree() / v0;
    let mut best_lambda = uniform;
    let mut best_up = v0;
    let mut best_low = 0.0f64;
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let centered = center(&barrier, x, tau, opts.max_iter.saturating_sub(iterations).max(1));
        x = centered.x;
        iterations += centered.steps;

        let lambda: Vec<f64> = x.as_slice()[..n].to_vec();
        let Some(inv) = chol_inverse(&vector_covariance(&lambda, items)) else {
            break;
        };
        let variances: Vec<f64> = targets.iter().map(|y| linalg::quad_form(&inv, y)).collect();
        let current = variances.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if current < best_up {
            best_up = current;
            best_lambda.clone_from(&lambda);
        }
        // central-path multipliers give the dual bound phi^2 / max_i z_i^T G z_i
        let t = x[n];
        let raw: Vec<f64> = variances.iter().map(|v| 1.0 / (t - v)).collect();
        let total: f64 = raw.iter().sum();
        let mut g = DMatrix::zeros(d, d);
        let mut phi = 0.0;
        for ((y, r), v) in targets.iter().zip(&raw).zip(&variances) {
            let mu = r / total;
            let ay = &inv * y;
            g.ger(mu, &ay, &ay, 1.0);
            phi += mu * v;
        }
        let top = items
            .iter()
            .map(|z| linalg::quad_form(&g, z))
            .fold(f64::NEG_INFINITY, f64::max);
        if top > 0.0 {
            best_low = best_low.max(phi * phi / top);
        }
        trace.push(best_up);

        let gap = (best_up - best_low) / best_up;
        let exhausted = barrier.degree() / tau < 1e-12 * best_up;
        if gap <= INTERNAL_GAP || iterations >= opts.max_iter || exhausted {
            break;
        }
        tau *= TAU_GROWTH;
    }

    let cov = vector_covariance(&best_lambda, items);
    let objective = max_prediction_variance(&cov, targets)?;
    let gap = ((objective - best_low) / objective).max(0.0);
    Ok(Design {
        weights: best_lambda,
        covariance: cov,
        objective_value: objective,
        certificate_gap: gap,
        converged: gap <= opts.tol,
        iterations,
        trace,
    })
}
