//! Problem instances, the simulated environment and run configuration.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance for `B^T B = I`.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// A finite set of arms spanning `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmSet {
    arms: Vec<DVector<f64>>,
    dim: usize,
    norm_bound: f64,
}

impl ArmSet {
    pub fn new(arms: Vec<DVector<f64>>) -> Result<Self> {
        let dim = arms
            .first()
            .map(|a| a.len())
            .ok_or_else(|| Error::InvalidShape("empty arm set".into()))?;
        if arms.iter().any(|a| a.len() != dim) {
            return Err(Error::InvalidShape("arms have different dimensions".into()));
        }
        if arms.len() < dim {
            return Err(Error::InvalidShape(format!(
                "{} arms cannot span R^{dim}",
                arms.len()
            )));
        }
        let stack = DMatrix::from_fn(arms.len(), dim, |i, j| arms[i][j]);
        let rank = linalg::rank(&stack, 1e-10);
        if rank < dim {
            return Err(Error::RankDeficient { rank, dim });
        }
        let norm_bound = arms.iter().map(|a| a.norm()).fold(0.0, f64::max);
        Ok(Self {
            arms,
            dim,
            norm_bound,
        })
    }

    /// The canonical basis `e_1, ..., e_d`.
    pub fn canonical(dim: usize) -> Self {
        let arms = (0..dim)
            .map(|i| DVector::from_fn(dim, |j, _| if i == j { 1.0 } else { 0.0 }))
            .collect();
        Self {
            arms,
            dim,
            norm_bound: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.arms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn norm_bound(&self) -> f64 {
        self.norm_bound
    }

    pub fn arm(&self, i: usize) -> Result<&DVector<f64>> {
        self.arms.get(i).ok_or(Error::UnknownArm(i))
    }

    pub fn arms(&self) -> &[DVector<f64>] {
        &self.arms
    }

    /// Outer products `x_i x_i^T`.
    pub fn outer_products(&self) -> Vec<DMatrix<f64>> {
        self.arms.iter().map(|x| x * x.transpose()).collect()
    }
}

/// Hidden ground truth shared by all tasks: `theta_m = B w_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEnsemble {
    extractor: DMatrix<f64>,
    predictions: DMatrix<f64>,
    norm_bound: f64,
    thetas: Vec<DVector<f64>>,
}

impl TaskEnsemble {
    /// `extractor` is `d x k` with orthonormal columns, `predictions` is `k x M`.
    pub fn new(extractor: DMatrix<f64>, predictions: DMatrix<f64>) -> Result<Self> {
        let (d, k) = extractor.shape();
        if k == 0 || k > d {
            return Err(Error::InvalidShape(format!("extractor is {d}x{k}")));
        }
        if predictions.nrows() != k || predictions.ncols() == 0 {
            return Err(Error::InvalidShape(format!(
                "predictions are {}x{}, expected {k}xM",
                predictions.nrows(),
                predictions.ncols()
            )));
        }
        let gram = extractor.transpose() * &extractor;
        if (gram - DMatrix::identity(k, k)).amax() > ORTHONORMAL_TOL {
            return Err(Error::InvalidShape("extractor columns are not orthonormal".into()));
        }
        let thetas = predictions
            .column_iter()
            .map(|w| &extractor * w)
            .collect::<Vec<_>>();
        let norm_bound = predictions
            .column_iter()
            .map(|w| w.norm())
            .fold(0.0, f64::max);
        Ok(Self {
            extractor,
            predictions,
            norm_bound,
            thetas,
        })
    }

    /// `B = [I_k; 0]` with the tasks split into `k` equal groups, group `i`
    /// having `w = e_i`.
    pub fn groups(d: usize, k: usize, tasks: usize) -> Result<Self> {
        if k == 0 || d <= k {
            return Err(Error::InvalidShape(format!("need d > k >= 1, got d={d}, k={k}")));
        }
        if tasks == 0 || tasks % k != 0 {
            return Err(Error::InvalidShape(format!("k={k} must divide M={tasks}")));
        }
        let extractor = DMatrix::from_fn(d, k, |i, j| if i == j { 1.0 } else { 0.0 });
        let per_group = tasks / k;
        let predictions = DMatrix::from_fn(k, tasks, |i, m| if m / per_group == i { 1.0 } else { 0.0 });
        Self::new(extractor, predictions)
    }

    pub fn dim(&self) -> usize {
        self.extractor.nrows()
    }

    pub fn rank(&self) -> usize {
        self.extractor.ncols()
    }

    pub fn num_tasks(&self) -> usize {
        self.predictions.ncols()
    }

    pub fn extractor(&self) -> &DMatrix<f64> {
        &self.extractor
    }

    pub fn predictions(&self) -> &DMatrix<f64> {
        &self.predictions
    }

    /// `L_w`, the largest prediction-vector norm.
    pub fn norm_bound(&self) -> f64 {
        self.norm_bound
    }

    pub fn theta(&self, m: usize) -> Result<&DVector<f64>> {
        self.thetas.get(m).ok_or(Error::UnknownTask(m))
    }

    pub fn thetas(&self) -> &[DVector<f64>] {
        &self.thetas
    }

    /// `sigma_min((1/M) sum_m w_m w_m^T)`, the task-diversity statistic.
    pub fn diversity(&self) -> f64 {
        let m = self.num_tasks() as f64;
        let cov = &self.predictions * self.predictions.transpose() / m;
        linalg::min_eigenvalue(&cov)
    }

    /// `(1/M) sum_m theta_m theta_m^T`, the target of the moment estimators.
    pub fn theta_second_moment(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut z = DMatrix::zeros(d, d);
        for t in &self.thetas {
            z += t * t.transpose();
        }
        z / self.num_tasks() as f64
    }
}

/// Zero-mean reward noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseModel {
    StandardGaussian,
    ScaledGaussian { scale: f64 },
    /// Uniform on `[-sqrt(3) s, sqrt(3) s]`, variance `s^2`.
    BoundedUniform { scale: f64 },
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::StandardGaussian
    }
}

impl NoiseModel {
    /// Noise-free oracle for deterministic tests.
    pub fn zero() -> Self {
        NoiseModel::ScaledGaussian { scale: 0.0 }
    }

    pub fn scale(&self) -> f64 {
        match *self {
            NoiseModel::StandardGaussian => 1.0,
            NoiseModel::ScaledGaussian { scale } | NoiseModel::BoundedUniform { scale } => scale,
        }
    }

    pub fn variance(&self) -> f64 {
        self.scale() * self.scale()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.scale();
        if !(s >= 0.0) || !s.is_finite() {
            return Err(Error::Config(format!("noise scale must be >= 0, got {s}")));
        }
        Ok(())
    }

    /// One noise draw. Always consumes the generator, even at scale 0, so
    /// streams line up across noise settings.
    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            NoiseModel::StandardGaussian => rng.sample::<f64, _>(StandardNormal),
            NoiseModel::ScaledGaussian { scale } => scale * rng.sample::<f64, _>(StandardNormal),
            NoiseModel::BoundedUniform { scale } => {
                let u: f64 = rng.random_range(-1.0..1.0);
                scale * 3f64.sqrt() * u
            }
        }
    }
}

/// Finite contexts and actions with features `phi(s, a)` and a context distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextModel {
    features: Vec<Vec<DVector<f64>>>,
    distribution: Vec<f64>,
    cumulative: Vec<f64>,
    dim: usize,
    norm_bound: f64,
}

impl ContextModel {
    /// `features[s][a]` is `phi(s, a)`; `distribution[s]` is `D(s)`.
    pub fn new(features: Vec<Vec<DVector<f64>>>, distribution: Vec<f64>) -> Result<Self> {
        let n_ctx = features.len();
        if n_ctx == 0 || distribution.len() != n_ctx {
            return Err(Error::InvalidShape(format!(
                "{n_ctx} contexts with a distribution of length {}",
                distribution.len()
            )));
        }
        let n_act = features[0].len();
        if n_act == 0 || features.iter().any(|row| row.len() != n_act) {
            return Err(Error::InvalidShape("every context needs the same actions".into()));
        }
        let dim = features[0][0].len();
        if features.iter().flatten().any(|f| f.len() != dim) {
            return Err(Error::InvalidShape("features have different dimensions".into()));
        }
        if distribution.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::InvalidShape("negative context probability".into()));
        }
        let total: f64 = distribution.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidShape(format!("context distribution sums to {total}")));
        }
        let mut acc = 0.0;
        let cumulative = distribution
            .iter()
            .map(|p| {
                acc += p / total;
                acc
            })
            .collect();
        let norm_bound = features.iter().flatten().map(|f| f.norm()).fold(0.0, f64::max);
        Ok(Self {
            features,
            distribution,
            cumulative,
            dim,
            norm_bound,
        })
    }

    /// `phi(s, a) = e_a` for every context, uniform `D`. Requires `n_actions == d`.
    pub fn canonical(d: usize, n_contexts: usize) -> Self {
        let row: Vec<DVector<f64>> = (0..d)
            .map(|a| DVector::from_fn(d, |j, _| if a == j { 1.0 } else { 0.0 }))
            .collect();
        let features = vec![row; n_contexts];
        let distribution = vec![1.0 / n_contexts as f64; n_contexts];
        Self::new(features, distribution).expect("canonical context model is valid")
    }

    pub fn num_contexts(&self) -> usize {
        self.features.len()
    }

    pub fn num_actions(&self) -> usize {
        self.features[0].len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `L_phi`.
    pub fn norm_bound(&self) -> f64 {
        self.norm_bound
    }

    pub fn distribution(&self) -> &[f64] {
        &self.distribution
    }

    pub fn feature(&self, s: usize, a: usize) -> Result<&DVector<f64>> {
        let row = self.features.get(s).ok_or(Error::InvalidShape(format!("unknown context {s}")))?;
        row.get(a).ok_or(Error::UnknownAction(a))
    }

    pub fn features(&self) -> &[Vec<DVector<f64>>] {
        &self.features
    }

    #[inline]
    pub fn sample_context<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1)
    }

    /// `E_{s ~ dist}[phi(s, a) phi(s, a)^T]` for every action.
    pub fn moment_tables(&self, dist: &[f64]) -> Vec<DMatrix<f64>> {
        (0..self.num_actions())
            .map(|a| {
                let mut m = DMatrix::zeros(self.dim, self.dim);
                for (s, &p) in dist.iter().enumerate() {
                    if p > 0.0 {
                        let f = &self.features[s][a];
                        m += f * f.transpose() * p;
                    }
                }
                m
            })
            .collect()
    }

    /// Coverage statistic: the best `sigma_min(sum_a lambda(a) E_D[phi phi^T])`
    /// over a simplex grid of `lambda` and the E-optimal design's weights.
    pub fn nu_hat(&self) -> f64 {
        let moments = self.moment_tables(&self.distribution);
        let n = moments.len();
        let resolution = grid_resolution(n, 5000);
        let mut best = 0.0f64;
        let mut counts = vec![0usize; n];
        simplex_grid(n, resolution, &mut counts, 0, &mut |c| {
            let mut a = DMatrix::zeros(self.dim, self.dim);
            for (m, &ci) in moments.iter().zip(c) {
                if ci > 0 {
                    a += m * (ci as f64 / resolution as f64);
                }
            }
            best = best.max(linalg::min_eigenvalue(&a));
        });
        if let Ok(design) = crate::design::solve_e_optimal(&moments) {
            best = best.max(1.0 / design.objective_value);
        }
        best
    }
}

fn grid_resolution(n: usize, max_points: usize) -> usize {
    // number of grid points is C(r + n - 1, n - 1)
    let mut r = 1;
    loop {
        let next = r + 1;
        let mut points = 1.0f64;
        for i in 1..n {
            points *= (next + i) as f64 / i as f64;
        }
        if points > max_points as f64 || next > 10 {
            return r;
        }
        r = next;
    }
}

fn simplex_grid(n: usize, remaining: usize, counts: &mut Vec<usize>, idx: usize, f: &mut dyn FnMut(&[usize])) {
    if idx == n - 1 {
        counts[idx] = remaining;
        f(counts);
        return;
    }
    for c in 0..=remaining {
        counts[idx] = c;
        simplex_grid(n, remaining - c, counts, idx + 1, f);
    }
}

/// A linear-bandit multi-task instance.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearInstance {
    pub arms: ArmSet,
    pub tasks: TaskEnsemble,
    pub noise: NoiseModel,
}

impl LinearInstance {
    pub fn new(arms: ArmSet, tasks: TaskEnsemble, noise: NoiseModel) -> Result<Self> {
        if arms.dim() != tasks.dim() {
            return Err(Error::InvalidShape(format!(
                "arms live in R^{} but the extractor in R^{}",
                arms.dim(),
                tasks.dim()
            )));
        }
        noise.validate()?;
        Ok(Self { arms, tasks, noise })
    }

    pub fn mean_reward(&self, m: usize, arm: usize) -> Result<f64> {
        Ok(self.arms.arm(arm)?.dot(self.tasks.theta(m)?))
    }

    /// Index of the best arm of task `m` (lowest index on ties).
    pub fn best_arm(&self, m: usize) -> Result<usize> {
        let theta = self.tasks.theta(m)?;
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for (i, x) in self.arms.arms().iter().enumerate() {
            let v = x.dot(theta);
            if v > best_val {
                best_val = v;
                best = i;
            }
        }
        Ok(best)
    }

    /// Smallest positive gap between a task's best arm and any other arm.
    pub fn min_gap(&self) -> f64 {
        let mut gap = f64::INFINITY;
        for theta in self.tasks.thetas() {
            let vals: Vec<f64> = self.arms.arms().iter().map(|x| x.dot(theta)).collect();
            let best = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in vals {
                let g = best - v;
                if g > 0.0 {
                    gap = gap.min(g);
                }
            }
        }
        gap
    }
}

/// A contextual multi-task instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualInstance {
    pub contexts: ContextModel,
    pub tasks: TaskEnsemble,
    pub noise: NoiseModel,
}

impl ContextualInstance {
    pub fn new(contexts: ContextModel, tasks: TaskEnsemble, noise: NoiseModel) -> Result<Self> {
        if contexts.dim() != tasks.dim() {
            return Err(Error::InvalidShape(format!(
                "features live in R^{} but the extractor in R^{}",
                contexts.dim(),
                tasks.dim()
            )));
        }
        noise.validate()?;
        Ok(Self {
            contexts,
            tasks,
            noise,
        })
    }

    pub fn mean_reward(&self, m: usize, s: usize, a: usize) -> Result<f64> {
        Ok(self.contexts.feature(s, a)?.dot(self.tasks.theta(m)?))
    }
}

/// Canonical arms and grouped tasks: `d` basis arms, `B = [I_k; 0]`, `w` in
/// `k` equal groups.
pub fn make_canonical_instance(d: usize, k: usize, tasks: usize) -> Result<(ArmSet, TaskEnsemble)> {
    let ensemble = TaskEnsemble::groups(d, k, tasks)?;
    Ok((ArmSet::canonical(d), ensemble))
}

/// Contextual analogue: `phi(s, a) = e_a` for all `s`, uniform over `n_contexts`.
pub fn make_canonical_contextual(
    d: usize,
    k: usize,
    tasks: usize,
    n_contexts: usize,
) -> Result<(ContextModel, TaskEnsemble)> {
    let ensemble = TaskEnsemble::groups(d, k, tasks)?;
    if n_contexts == 0 {
        return Err(Error::InvalidShape("need at least one context".into()));
    }
    Ok((ContextModel::canonical(d, n_contexts), ensemble))
}

/// Simulated linear-bandit environment with a global pull counter.
#[derive(Debug)]
pub struct Environment<'a> {
    instance: &'a LinearInstance,
    means: Vec<Vec<f64>>,
    pulls: AtomicU64,
}

impl<'a> Environment<'a> {
    pub fn new(instance: &'a LinearInstance) -> Self {
        let means = instance
            .tasks
            .thetas()
            .iter()
            .map(|t| instance.arms.arms().iter().map(|x| x.dot(t)).collect())
            .collect();
        Self {
            instance,
            means,
            pulls: AtomicU64::new(0),
        }
    }

    pub fn instance(&self) -> &LinearInstance {
        self.instance
    }

    /// `x^T theta_m + eta`. One noise draw, one count.
    #[inline]
    pub fn pull<R: Rng + ?Sized>(&self, m: usize, arm: usize, rng: &mut R) -> Result<f64> {
        let row = self.means.get(m).ok_or(Error::UnknownTask(m))?;
        let mean = *row.get(arm).ok_or(Error::UnknownArm(arm))?;
        self.pulls.fetch_add(1, Ordering::Relaxed);
        Ok(mean + self.instance.noise.sample(rng))
    }

    /// Pulls `arm` `count` times and returns the sum of rewards.
    pub fn pull_many<R: Rng + ?Sized>(&self, m: usize, arm: usize, count: usize, rng: &mut R) -> Result<f64> {
        let row = self.means.get(m).ok_or(Error::UnknownTask(m))?;
        let mean = *row.get(arm).ok_or(Error::UnknownArm(arm))?;
        let noise = self.instance.noise;
        let mut sum = 0.0;
        for _ in 0..count {
            sum += mean + noise.sample(rng);
        }
        self.pulls.fetch_add(count as u64, Ordering::Relaxed);
        Ok(sum)
    }

    pub fn pulls(&self) -> u64 {
        self.pulls.load(Ordering::Relaxed)
    }
}

/// Simulated contextual environment. Contexts are observed first, then acted on.
#[derive(Debug)]
pub struct ContextualEnvironment<'a> {
    instance: &'a ContextualInstance,
    /// `means[m][s * A + a]`
    means: Vec<Vec<f64>>,
    pulls: AtomicU64,
}

impl<'a> ContextualEnvironment<'a> {
    pub fn new(instance: &'a ContextualInstance) -> Self {
        let ctx = &instance.contexts;
        let means = instance
            .tasks
            .thetas()
            .iter()
            .map(|t| {
                ctx.features()
                    .iter()
                    .flat_map(|row| row.iter().map(move |f| f.dot(t)))
                    .collect()
            })
            .collect();
        Self {
            instance,
            means,
            pulls: AtomicU64::new(0),
        }
    }

    pub fn instance(&self) -> &ContextualInstance {
        self.instance
    }

    #[inline]
    pub fn observe_context<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.instance.contexts.sample_context(rng)
    }

    /// Plays action `a` in the already observed context `s` for task `m`.
    #[inline]
    pub fn act<R: Rng + ?Sized>(&self, m: usize, s: usize, a: usize, rng: &mut R) -> Result<f64> {
        let n_act = self.instance.contexts.num_actions();
        if a >= n_act {
            return Err(Error::UnknownAction(a));
        }
        let row = self.means.get(m).ok_or(Error::UnknownTask(m))?;
        let mean = row[s * n_act + a];
        self.pulls.fetch_add(1, Ordering::Relaxed);
        Ok(mean + self.instance.noise.sample(rng))
    }

    /// Draws a context, then plays `a` in it.
    pub fn step<R: Rng + ?Sized>(&self, m: usize, a: usize, rng: &mut R) -> Result<(usize, f64)> {
        if m >= self.means.len() {
            return Err(Error::UnknownTask(m));
        }
        if a >= self.instance.contexts.num_actions() {
            return Err(Error::UnknownAction(a));
        }
        let s = self.observe_context(rng);
        let r = self.act(m, s, a, rng)?;
        Ok((s, r))
    }

    pub fn pulls(&self) -> u64 {
        self.pulls.load(Ordering::Relaxed)
    }
}

/// Algorithm parameters, including the multipliers applied to the
/// theoretical batch-size formulas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub delta: f64,
    pub epsilon: f64,
    pub zeta: f64,
    pub gamma: f64,
    #[serde(rename = "scale_T")]
    pub scale_t: f64,
    pub scale_p: f64,
    #[serde(rename = "scale_N")]
    pub scale_n: f64,
    #[serde(rename = "scale_T0")]
    pub scale_t0: f64,
    /// Multiplier on the `180 d' / zeta^2` rounding minimum.
    pub scale_round: f64,
    pub omega_floor: f64,
    pub nu_floor: f64,
    pub max_phases: usize,
    pub seed: u64,
    pub parallelism: usize,
    /// Subtract the known noise bias from the moment matrix. Tests only turn this off.
    pub bias_correction: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            delta: 0.005,
            epsilon: 0.1,
            zeta: 0.1,
            gamma: 1.0,
            scale_t: 1.0,
            scale_p: 1.0,
            scale_n: 1.0,
            scale_t0: 1.0,
            scale_round: 1.0,
            omega_floor: 0.1,
            nu_floor: 0.1,
            max_phases: 20,
            seed: 0,
            parallelism: 1,
            bias_correction: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.delta > 0.0 && self.delta < 1.0) {
            problems.push(format!("delta must be in (0,1), got {}", self.delta));
        }
        if !(self.epsilon > 0.0) {
            problems.push(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.zeta > 0.0) {
            problems.push(format!("zeta must be > 0, got {}", self.zeta));
        }
        if !(self.gamma >= 1.0) {
            problems.push(format!("gamma must be >= 1, got {}", self.gamma));
        }
        for (name, v) in [
            ("scale_T", self.scale_t),
            ("scale_p", self.scale_p),
            ("scale_N", self.scale_n),
            ("scale_T0", self.scale_t0),
            ("scale_round", self.scale_round),
            ("omega_floor", self.omega_floor),
            ("nu_floor", self.nu_floor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be > 0, got {v}"));
            }
        }
        if self.max_phases == 0 {
            problems.push("max_phases must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// `ceil(scale_round * 180 d' / zeta^2)`.
    pub fn min_rounding_samples(&self, dim: usize) -> usize {
        (self.scale_round * 180.0 * dim as f64 / (self.zeta * self.zeta)).ceil() as usize
    }
}
