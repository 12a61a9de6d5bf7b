//! Experiment orchestration: config files, seeded sweeps over `M` and CSV output.
//!
//! A config is a JSON object:
//!
//! ```json
//! {
//!   "instance": { "d": 5, "k": 2, "contexts": 5, "noise": { "kind": "standard-gaussian" } },
//!   "run": { "delta": 0.005, "scale_p": 0.01, "scale_T": 0.01 },
//!   "algos": ["douexpdes", "indrage"],
//!   "tasks": [50, 100, 150],
//!   "replications": 50,
//!   "master_seed": 1
//! }
//! ```
//!
//! `instance` defaults to canonical arms `e_1..e_d`, `B = [I_k; 0]` and tasks
//! split into `k` equal groups with `w = e_i`. Explicit `arms`, `extractor`
//! (rows of `B`), `predictions` (one `w` per task), `features` (per context,
//! per action) and `distribution` override the defaults. `run` holds any
//! [`RunConfig`] field; missing fields take their defaults.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::design;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ArmSet, ContextModel, ContextualInstance, LinearInstance, NoiseModel, RunConfig, TaskEnsemble};
use crate::repbai::{self, PhaseLog};
use crate::repbpi;
use crate::rng;

/// Version written in the `schema` column.
pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 23] = [
    "schema",
    "algo",
    "d",
    "k",
    "M",
    "n",
    "S",
    "A",
    "delta",
    "epsilon",
    "zeta",
    "gamma",
    "scale_T0",
    "scale_p",
    "scale_T",
    "scale_N",
    "seed",
    "run_id",
    "samples_total",
    "success",
    "max_subopt",
    "wallclock_ms",
    "flags",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algo {
    #[serde(rename = "douexpdes")]
    DouExpDes,
    #[serde(rename = "indrage")]
    IndRage,
    #[serde(rename = "cdouexpdes")]
    CDouExpDes,
    #[serde(rename = "indrflinucb")]
    IndRfLinUcb,
}

impl Algo {
    pub fn tag(self) -> &'static str {
        match self {
            Algo::DouExpDes => "douexpdes",
            Algo::IndRage => "indrage",
            Algo::CDouExpDes => "cdouexpdes",
            Algo::IndRfLinUcb => "indrflinucb",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "douexpdes" => Ok(Algo::DouExpDes),
            "indrage" => Ok(Algo::IndRage),
            "cdouexpdes" => Ok(Algo::CDouExpDes),
            "indrflinucb" => Ok(Algo::IndRfLinUcb),
            other => Err(Error::Config(format!("unknown algorithm `{other}`"))),
        }
    }

    pub fn is_contextual(self) -> bool {
        matches!(self, Algo::CDouExpDes | Algo::IndRfLinUcb)
    }
}

fn default_contexts() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec {
    pub d: usize,
    pub k: usize,
    /// Number of contexts of the canonical contextual model.
    #[serde(default = "default_contexts")]
    pub contexts: usize,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub arms: Option<Vec<Vec<f64>>>,
    /// Rows of the `d x k` feature extractor.
    #[serde(default)]
    pub extractor: Option<Vec<Vec<f64>>>,
    /// One prediction vector per task; fixes `M`.
    #[serde(default)]
    pub predictions: Option<Vec<Vec<f64>>>,
    /// `features[s][a]` in `R^d`.
    #[serde(default)]
    pub features: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub distribution: Option<Vec<f64>>,
}

fn vectors(rows: &[Vec<f64>]) -> Vec<DVector<f64>> {
    rows.iter().map(|r| DVector::from_column_slice(r)).collect()
}

impl InstanceSpec {
    pub fn canonical(d: usize, k: usize) -> Self {
        Self {
            d,
            k,
            contexts: default_contexts(),
            noise: NoiseModel::default(),
            arms: None,
            extractor: None,
            predictions: None,
            features: None,
            distribution: None,
        }
    }

    pub fn tasks(&self, m: usize) -> Result<TaskEnsemble> {
        if self.extractor.is_none() && self.predictions.is_none() {
            return TaskEnsemble::groups(self.d, self.k, m);
        }
        let extractor = match &self.extractor {
            Some(rows) => {
                if rows.len() != self.d || rows.iter().any(|r| r.len() != self.k) {
                    return Err(Error::Config(format!("instance.extractor: expected {}x{}", self.d, self.k)));
                }
                DMatrix::from_fn(self.d, self.k, |i, j| rows[i][j])
            }
            None => DMatrix::from_fn(self.d, self.k, |i, j| if i == j { 1.0 } else { 0.0 }),
        };
        let predictions = match &self.predictions {
            Some(ws) => {
                if ws.len() != m || ws.iter().any(|w| w.len() != self.k) {
                    return Err(Error::Config(format!(
                        "instance.predictions: expected {m} vectors of length {}",
                        self.k
                    )));
                }
                DMatrix::from_fn(self.k, m, |i, j| ws[j][i])
            }
            None => TaskEnsemble::groups(self.d, self.k, m)?.predictions().clone(),
        };
        TaskEnsemble::new(extractor, predictions)
    }

    pub fn linear(&self, m: usize) -> Result<LinearInstance> {
        let arms = match &self.arms {
            Some(rows) => ArmSet::new(vectors(rows))?,
            None => ArmSet::canonical(self.d),
        };
        LinearInstance::new(arms, self.tasks(m)?, self.noise)
    }

    pub fn contextual(&self, m: usize) -> Result<ContextualInstance> {
        let contexts = match &self.features {
            Some(table) => {
                let features = table.iter().map(|row| vectors(row)).collect();
                let n = table.len().max(1);
                let dist = self.distribution.clone().unwrap_or_else(|| vec![1.0 / n as f64; n]);
                ContextModel::new(features, dist)?
            }
            None => {
                if self.contexts == 0 {
                    return Err(Error::Config("instance.contexts must be >= 1".into()));
                }
                let dist = self
                    .distribution
                    .clone()
                    .unwrap_or_else(|| vec![1.0 / self.contexts as f64; self.contexts]);
                let canonical = ContextModel::canonical(self.d, self.contexts);
                ContextModel::new(canonical.features().to_vec(), dist)?
            }
        };
        ContextualInstance::new(contexts, self.tasks(m)?, self.noise)
    }
}

fn default_replications() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub instance: InstanceSpec,
    #[serde(default)]
    pub run: RunConfig,
    pub algos: Vec<Algo>,
    /// Values of `M` to sweep.
    pub tasks: Vec<usize>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub master_seed: u64,
    /// Fill `wallclock_ms`. Off by default so repeated sweeps give identical files.
    #[serde(default)]
    pub record_wallclock: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Field-level checks; all problems are reported at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(Error::Config(msg)) = self.run.validate() {
            problems.push(format!("run: {msg}"));
        }
        if self.instance.k == 0 || self.instance.k > self.instance.d {
            problems.push(format!(
                "instance: need 1 <= k <= d, got d={}, k={}",
                self.instance.d, self.instance.k
            ));
        }
        if self.algos.is_empty() {
            problems.push("algos: empty".into());
        }
        if self.tasks.is_empty() {
            problems.push("tasks: empty".into());
        }
        for (i, &m) in self.tasks.iter().enumerate() {
            if m == 0 || (self.instance.predictions.is_none() && self.instance.k > 0 && m % self.instance.k != 0) {
                problems.push(format!("tasks[{i}]: k={} must divide M={m}", self.instance.k));
            }
        }
        if self.replications == 0 {
            problems.push("replications: must be >= 1".into());
        }
        let schedule: f64 = (1..=self.run.max_phases).map(|t| repbai::phase_delta(self.run.delta, t)).sum();
        if !(schedule < self.run.delta) {
            problems.push(format!("run: phase confidences sum to {schedule} >= delta"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub algo: Algo,
    pub d: usize,
    pub k: usize,
    pub tasks: usize,
    /// Arms, for the linear problems.
    pub arms: Option<usize>,
    pub contexts: Option<usize>,
    pub actions: Option<usize>,
    pub delta: f64,
    pub epsilon: f64,
    pub zeta: f64,
    pub gamma: f64,
    pub scale_t0: f64,
    pub scale_p: f64,
    pub scale_t: f64,
    pub scale_n: f64,
    pub seed: u64,
    pub run_id: usize,
    pub samples_total: u64,
    pub success: bool,
    pub max_subopt: Option<f64>,
    pub wallclock_ms: f64,
    pub flags: Vec<String>,
}

impl RunRecord {
    fn fields(&self) -> Vec<String> {
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            SCHEMA_VERSION.to_string(),
            self.algo.tag().into(),
            self.d.to_string(),
            self.k.to_string(),
            self.tasks.to_string(),
            opt(self.arms),
            opt(self.contexts),
            opt(self.actions),
            fmt_float(self.delta),
            fmt_float(self.epsilon),
            fmt_float(self.zeta),
            fmt_float(self.gamma),
            fmt_float(self.scale_t0),
            fmt_float(self.scale_p),
            fmt_float(self.scale_t),
            fmt_float(self.scale_n),
            self.seed.to_string(),
            self.run_id.to_string(),
            self.samples_total.to_string(),
            self.success.to_string(),
            self.max_subopt.map(fmt_float).unwrap_or_default(),
            fmt_float(self.wallclock_ms),
            self.flags.join(";"),
        ]
    }
}

/// Mean and standard deviation of `samples_total` in one `(algo, M)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub template: RunRecord,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
    pub success_rate: f64,
}

impl CellSummary {
    pub fn from_records(records: &[RunRecord]) -> Self {
        let n = records.len() as f64;
        let mean = records.iter().map(|r| r.samples_total as f64).sum::<f64>() / n;
        let var = if records.len() > 1 {
            records.iter().map(|r| (r.samples_total as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let success_rate = records.iter().filter(|r| r.success).count() as f64 / n;
        let max_subopt = records.iter().filter_map(|r| r.max_subopt).reduce(f64::max);
        let mut template = records[0].clone();
        template.max_subopt = max_subopt;
        template.wallclock_ms = records.iter().map(|r| r.wallclock_ms).sum::<f64>() / n;
        Self {
            template,
            runs: records.len(),
            mean,
            std: var.sqrt(),
            success_rate,
        }
    }

    /// Same columns as a run row: `run_id = summary`, `samples_total` is the
    /// mean, `success` the success rate, `max_subopt` the worst run and
    /// `flags` carries `runs=..;std=..`.
    fn fields(&self) -> Vec<String> {
        let mut f = self.template.fields();
        f[16] = String::new();
        f[17] = "summary".into();
        f[18] = fmt_float(self.mean);
        f[19] = fmt_float(self.success_rate);
        f[22] = format!("runs={};std={}", self.runs, fmt_float(self.std));
        f
    }
}

/// Nine significant digits, fixed notation for moderate exponents, trailing zeros trimmed.
pub fn fmt_float(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Result of one run: the CSV record plus the per-phase log for the linear algorithms.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    pub phases: Vec<PhaseLog>,
    pub error: Option<Error>,
}

/// Runs one algorithm on the instance with `m` tasks. Algorithm errors are
/// captured in the record (`success = false`, flag `error=CODE`); config errors
/// are returned.
pub fn run_single(
    algo: Algo,
    spec: &InstanceSpec,
    m: usize,
    cfg: &RunConfig,
    run_id: usize,
    wallclock: bool,
) -> Result<RunOutput> {
    cfg.validate()?;
    let mut record = RunRecord {
        algo,
        d: spec.d,
        k: spec.k,
        tasks: m,
        arms: None,
        contexts: None,
        actions: None,
        delta: cfg.delta,
        epsilon: cfg.epsilon,
        zeta: cfg.zeta,
        gamma: cfg.gamma,
        scale_t0: cfg.scale_t0,
        scale_p: cfg.scale_p,
        scale_t: cfg.scale_t,
        scale_n: cfg.scale_n,
        seed: cfg.seed,
        run_id,
        samples_total: 0,
        success: false,
        max_subopt: None,
        wallclock_ms: 0.0,
        flags: Vec::new(),
    };
    let mut phases = Vec::new();
    let start = Instant::now();
    let outcome = if algo.is_contextual() {
        let instance = spec.contextual(m)?;
        record.contexts = Some(instance.contexts.num_contexts());
        record.actions = Some(instance.contexts.num_actions());
        let result = match algo {
            Algo::CDouExpDes => repbpi::c_dou_exp_des(&instance, cfg),
            _ => baselines::ind_rf_linucb(&instance, cfg),
        };
        result.map(|r| {
            let worst = r.max_suboptimality();
            record.samples_total = r.samples_total;
            record.max_subopt = Some(worst);
            record.success = worst <= cfg.epsilon;
            if r.jitter_fallbacks > 0 {
                record.flags.push(format!("jitter={}", r.jitter_fallbacks));
            }
        })
    } else {
        let instance = spec.linear(m)?;
        record.arms = Some(instance.arms.len());
        let result = match algo {
            Algo::DouExpDes => repbai::dou_exp_des(&instance, cfg),
            _ => baselines::ind_rage(&instance, cfg),
        };
        result.map(|r| {
            record.samples_total = r.samples_total;
            record.success = r.all_correct();
            if r.phase_cap_reached {
                record.flags.push("phase_cap".into());
            }
            if r.phases.iter().any(|p| !p.retention_ok) {
                record.flags.push("retention_violated".into());
            }
            phases = r.phases;
        })
    };
    if wallclock {
        record.wallclock_ms = start.elapsed().as_secs_f64() * 1e3;
    }
    let error = outcome.err();
    if let Some(e) = &error {
        if matches!(e, Error::Config(_)) {
            return Err(e.clone());
        }
        record.flags.push(format!("error={}", e.code()));
    }
    Ok(RunOutput {
        record,
        phases,
        error,
    })
}

/// Output of a sweep, in `(algo, M, run_id)` order.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub records: Vec<RunRecord>,
    pub summaries: Vec<CellSummary>,
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_csv(out, &self.records, &self.summaries)
    }

    /// Mean `samples_total` per `M` for one algorithm.
    pub fn means(&self, algo: Algo) -> Vec<(usize, f64)> {
        self.summaries
            .iter()
            .filter(|s| s.template.algo == algo)
            .map(|s| (s.template.tasks, s.mean))
            .collect()
    }
}

/// Runs every `(algo, M, run_id)` cell on a pool of `jobs` threads (0 uses
/// the config's `parallelism`). Each cell's seed is
/// [`rng::cell_seed`]`(master_seed, algo, M, run_id)`.
pub fn run_sweep(config: &ExperimentConfig, jobs: usize) -> Result<SweepResult> {
    config.validate()?;
    let mut cells = Vec::new();
    for &algo in &config.algos {
        for &m in &config.tasks {
            for run_id in 0..config.replications {
                cells.push((algo, m, run_id));
            }
        }
    }
    let threads = if jobs > 0 { jobs } else { config.run.parallelism.max(1) };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let records: Vec<RunRecord> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(algo, m, run_id)| {
                let cfg = RunConfig {
                    seed: rng::cell_seed(config.master_seed, algo.tag(), m, run_id),
                    ..config.run.clone()
                };
                run_single(algo, &config.instance, m, &cfg, run_id, config.record_wallclock).map(|o| o.record)
            })
            .collect::<Result<_>>()
    })?;
    let summaries = records
        .chunks(config.replications)
        .map(CellSummary::from_records)
        .collect();
    Ok(SweepResult { records, summaries })
}

pub fn write_csv<W: Write>(out: W, records: &[RunRecord], summaries: &[CellSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(CSV_COLUMNS).map_err(io)?;
    for r in records {
        w.write_record(r.fields()).map_err(io)?;
    }
    for s in summaries {
        w.write_record(s.fields()).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-phase log of one linear run as CSV.
pub fn write_phase_log<W: Write>(out: W, phases: &[PhaseLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record([
        "phase",
        "delta_t",
        "rounds",
        "candidates_before",
        "candidates_after",
        "elimination_samples",
        "max_rho_g",
        "sin_theta",
        "spectral_gap",
        "max_error",
        "retention_ok",
        "cumulative_samples",
    ])
    .map_err(io)?;
    let opt = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();
    let worst = |v: &[Option<f64>]| v.iter().flatten().copied().reduce(f64::max);
    for p in phases {
        w.write_record([
            p.phase.to_string(),
            fmt_float(p.delta_t),
            p.rounds.to_string(),
            p.candidates_before.iter().sum::<usize>().to_string(),
            p.candidates_after.iter().sum::<usize>().to_string(),
            p.elimination_samples.iter().sum::<usize>().to_string(),
            opt(worst(&p.rho_g)),
            opt(p.sin_theta),
            opt(p.spectral_gap),
            opt(worst(&p.max_error)),
            p.retention_ok.to_string(),
            p.cumulative_samples.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Ground-truth assumption diagnostics of an instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    /// `sigma_min((1/M) sum_m w_m w_m^T)`.
    pub diversity: f64,
    /// `min_m sigma_min(A(lambda*_m, B))`; absent without a linear arm set.
    pub omega: Option<f64>,
    pub nu_hat: Option<f64>,
    pub min_gap: Option<f64>,
}

/// `sigma_min(A(lambda*_m, B))` where `lambda*_m` is the gap-weighted
/// G-optimal design of task `m` in the true subspace.
pub fn omega(instance: &LinearInstance) -> Result<f64> {
    let b = instance.tasks.extractor();
    let reduced: Vec<DVector<f64>> = instance.arms.arms().iter().map(|x| b.transpose() * x).collect();
    let mut worst = f64::INFINITY;
    let mut seen: Vec<(usize, DVector<f64>)> = Vec::new();
    for m in 0..instance.tasks.num_tasks() {
        let theta = instance.tasks.theta(m)?;
        if seen.iter().any(|(_, t)| (t - theta).norm() == 0.0) {
            continue;
        }
        seen.push((m, theta.clone()));
        let best = instance.best_arm(m)?;
        let targets: Vec<DVector<f64>> = (0..reduced.len())
            .filter(|&i| i != best)
            .map(|i| {
                let gap = instance.mean_reward(m, best)? - instance.mean_reward(m, i)?;
                Ok((&reduced[best] - &reduced[i]) / gap)
            })
            .collect::<Result<_>>()?;
        let design = design::solve_g_optimal(&reduced, &targets)?;
        worst = worst.min(linalg::min_eigenvalue(&design.covariance));
    }
    Ok(worst)
}

pub fn check(spec: &InstanceSpec, m: usize, contextual: bool) -> Result<Diagnostics> {
    if contextual {
        let instance = spec.contextual(m)?;
        Ok(Diagnostics {
            diversity: instance.tasks.diversity(),
            omega: None,
            nu_hat: Some(instance.contexts.nu_hat()),
            min_gap: None,
        })
    } else {
        let instance = spec.linear(m)?;
        Ok(Diagnostics {
            diversity: instance.tasks.diversity(),
            omega: Some(omega(&instance)?),
            nu_hat: None,
            min_gap: Some(instance.min_gap()),
        })
    }
}
