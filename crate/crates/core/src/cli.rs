//! Command-line front end. Exit codes: 0 success, 2 usage or config error,
//! 3 algorithm failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use crate::design;
use crate::error::{Error, Result};
use crate::harness::{self, fmt_float, Algo, ExperimentConfig};
use crate::model::ArmSet;
use crate::rounding::{self, Criterion};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mtrep", version, about = "Multi-task representation learning for pure exploration in linear bandits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve an E- or G-optimal design and print the weights.
    Design(DesignArgs),
    /// Round a design into an integer batch.
    Round(RoundArgs),
    /// One best-arm identification run.
    Repbai(RunArgs),
    /// One policy identification run.
    Repbpi(RunArgs),
    /// Replicated runs over every configured algorithm and M.
    Sweep(SweepArgs),
    /// Ground-truth assumption diagnostics of the configured instance.
    Check(CheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CriterionArg {
    E,
    G,
}

#[derive(Debug, Args)]
struct DesignArgs {
    #[arg(long, value_enum, default_value = "e")]
    criterion: CriterionArg,
    /// Canonical arms in this dimension, unless the config lists arms.
    #[arg(long, default_value_t = 3)]
    dim: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RoundArgs {
    #[command(flatten)]
    design: DesignArgs,
    /// Batch size; defaults to the rounding minimum.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    zeta: f64,
    #[arg(long, default_value_t = 1.0)]
    scale_round: f64,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of tasks; defaults to the first configured value.
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the per-phase log of a linear run to this file.
    #[arg(long)]
    phase_log: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct CheckArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn arms_for(args: &DesignArgs) -> Result<ArmSet> {
    match &args.config {
        Some(path) => {
            let cfg = ExperimentConfig::load(path)?;
            Ok(cfg.instance.linear(cfg.tasks[0])?.arms)
        }
        None => {
            if args.dim == 0 {
                return Err(Error::Config("--dim must be >= 1".into()));
            }
            Ok(ArmSet::canonical(args.dim))
        }
    }
}

fn solve(args: &DesignArgs, arms: &ArmSet) -> Result<(Vec<DMatrix<f64>>, design::Design)> {
    let items = arms.outer_products();
    let d = match args.criterion {
        CriterionArg::E => design::solve_e_optimal(&items)?,
        CriterionArg::G => design::solve_g_optimal(arms.arms(), arms.arms())?,
    };
    Ok((items, d))
}

fn cmd_design(args: &DesignArgs) -> Result<i32> {
    let arms = arms_for(args)?;
    let (_, d) = solve(args, &arms)?;
    let mut out = output(&args.out)?;
    writeln!(out, "item,weight,rho,gap")?;
    for (i, w) in d.weights.iter().enumerate() {
        writeln!(
            out,
            "{i},{},{},{}",
            fmt_float(*w),
            fmt_float(d.objective_value),
            fmt_float(d.certificate_gap)
        )?;
    }
    out.flush()?;
    Ok(EXIT_OK)
}

fn cmd_round(args: &RoundArgs) -> Result<i32> {
    let arms = arms_for(&args.design)?;
    let (items, d) = solve(&args.design, &arms)?;
    let n = args
        .n
        .unwrap_or_else(|| rounding::min_batch_size(arms.dim(), args.zeta, args.scale_round));
    let criterion = match args.design.criterion {
        CriterionArg::E => Criterion::E,
        CriterionArg::G => Criterion::G(arms.arms()),
    };
    let batch = rounding::round(&items, &d, args.zeta, n, criterion, args.scale_round)?;
    let factor = batch.realized_factor_g.unwrap_or(batch.realized_factor_e);
    let mut out = output(&args.design.out)?;
    writeln!(out, "item,weight,count,factor")?;
    for (i, (w, c)) in d.weights.iter().zip(&batch.counts).enumerate() {
        writeln!(out, "{i},{},{c},{}", fmt_float(*w), fmt_float(factor))?;
    }
    out.flush()?;
    Ok(EXIT_OK)
}

fn cmd_run(args: &RunArgs, contextual: bool) -> Result<i32> {
    let config = ExperimentConfig::load(&args.config)?;
    let algo = match &args.algo {
        Some(tag) => Algo::parse(tag)?,
        None => *config
            .algos
            .iter()
            .find(|a| a.is_contextual() == contextual)
            .ok_or_else(|| Error::Config("no matching algorithm in config; pass --algo".into()))?,
    };
    if algo.is_contextual() != contextual {
        return Err(Error::Config(format!("algorithm `{}` does not solve this problem", algo.tag())));
    }
    let m = args.tasks.unwrap_or(config.tasks[0]);
    let mut cfg = config.run.clone();
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let threads = if args.jobs > 0 { args.jobs } else { cfg.parallelism.max(1) };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let run = pool.install(|| harness::run_single(algo, &config.instance, m, &cfg, 0, config.record_wallclock))?;
    harness::write_csv(output(&args.out)?, std::slice::from_ref(&run.record), &[])?;
    if let Some(path) = &args.phase_log {
        harness::write_phase_log(BufWriter::new(File::create(path)?), &run.phases)?;
    }
    if let Some(e) = &run.error {
        eprintln!("mtrep: {} ({})", e, e.code());
        return Ok(EXIT_FAILURE);
    }
    if run.record.flags.iter().any(|f| f == "phase_cap") {
        eprintln!("mtrep: phase cap reached before every task was resolved");
        return Ok(EXIT_FAILURE);
    }
    Ok(EXIT_OK)
}

fn cmd_sweep(args: &SweepArgs) -> Result<i32> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    let result = harness::run_sweep(&config, args.jobs)?;
    result.write_csv(output(&args.out)?)?;
    Ok(EXIT_OK)
}

fn cmd_check(args: &CheckArgs) -> Result<i32> {
    let config = ExperimentConfig::load(&args.config)?;
    let m = args.tasks.unwrap_or(config.tasks[0]);
    let contextual = config.algos.iter().all(|a| a.is_contextual());
    let diag = harness::check(&config.instance, m, contextual)?;
    let mut out = output(&args.out)?;
    writeln!(out, "statistic,value")?;
    writeln!(out, "diversity,{}", fmt_float(diag.diversity))?;
    for (name, v) in [("omega", diag.omega), ("min_gap", diag.min_gap), ("nu_hat", diag.nu_hat)] {
        if let Some(v) = v {
            writeln!(out, "{name},{}", fmt_float(v))?;
        }
    }
    out.flush()?;
    Ok(EXIT_OK)
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Design(a) => cmd_design(a),
        Command::Round(a) => cmd_round(a),
        Command::Repbai(a) => cmd_run(a, false),
        Command::Repbpi(a) => cmd_run(a, true),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Check(a) => cmd_check(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("mtrep: {e}");
            match e {
                Error::Config(_) | Error::Io(_) => EXIT_CONFIG,
                _ => EXIT_FAILURE,
            }
        }
    }
}
