//! Experiment runner: TOML configs, content-addressed run directories and
//! the `train`, `sample`, `eval` and `sweep` subcommands.
//!
//! A run directory `output_dir/<hash>` holds `ckpt_final` (raw and EMA
//! weights), `ckpt_ema` (EMA weights only), `ckpt_iter_<k>` snapshots,
//! `history.csv`, `config.resolved` and a `COMPLETE` marker. Re-running a
//! complete run is a no-op unless `--force` is given.

mod commands;
mod config;
mod sweep;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::{
    cmd_eval, cmd_sample, cmd_train, default_solver, evaluate_model, load_run, read_kappa_csv, read_points_csv,
    report_line, resolve_checkpoint, run_hash, sidecar_path, snapshot_name, write_points_csv, EvalOptions, RunInfo,
    SampleOptions, SampleSidecar, TrainOptions, TrainSummary, CKPT_EMA, CKPT_FINAL, CKPT_LAST_GOOD, COMPLETE_MARKER,
    CONFIG_RESOLVED, DEFAULT_DOI_N, DEFAULT_T_GRID, DEFAULT_W2_N, HISTORY_FILE,
};
pub use config::{config_hash, EvalSpec, ExperimentConfig, KappaFrom, Metric, SweepAxes};
pub use sweep::{cmd_sweep, write_sweep_csv, SweepRow};

use crate::error::{Error, Result};
use crate::solvers::{SolverSpec, DEFAULT_MAX_NFE, DEFAULT_TOL};

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "MIXFLOW_THREADS";

#[derive(Debug, Parser)]
#[command(name = "mixflow", version, about = "Rectified-flow training with learnable forward couplings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the model described by a config file.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Evaluate a metric on a checkpoint or on sample files.
    Eval(EvalArgs),
    /// Train and evaluate the cross product of the config's sweep axes.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverKind {
    Euler,
    Heun2,
    Rk45,
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    #[arg(long, value_enum)]
    pub solver: Option<SolverKind>,
    /// Steps of a fixed-step solver.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub rtol: f64,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub atol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_NFE)]
    pub max_nfe: usize,
}

impl SolverArgs {
    /// `None` when no solver flag was given.
    pub fn spec(&self) -> Result<Option<SolverSpec>> {
        let spec = match (self.solver, self.steps) {
            (None, None) => return Ok(None),
            (None | Some(SolverKind::Euler), steps) => SolverSpec::Euler {
                steps: steps.unwrap_or(128),
            },
            (Some(SolverKind::Heun2), steps) => SolverSpec::Heun2 {
                steps: steps.unwrap_or(64),
            },
            (Some(SolverKind::Rk45), Some(_)) => {
                return Err(Error::config("--steps does not apply to rk45; use --rtol/--atol"))
            }
            (Some(SolverKind::Rk45), None) => SolverSpec::Rk45 {
                rtol: self.rtol,
                atol: self.atol,
                max_nfe: self.max_nfe,
            },
        };
        spec.validate()?;
        Ok(Some(spec))
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Checkpoint file or run directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0.0)]
    pub w: f64,
    #[arg(long, value_enum, default_value_t = KappaFrom::None)]
    pub kappa_from: KappaFrom,
    #[arg(long)]
    pub kappa_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV; the sidecar goes to `<out>.json`.
    #[arg(long, default_value = "samples.csv")]
    pub out: PathBuf,
    #[arg(long)]
    pub deterministic: bool,
    /// Use raw instead of EMA weights.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub metric: Metric,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub w: f64,
    #[arg(long, value_enum, default_value_t = KappaFrom::None)]
    pub kappa_from: KappaFrom,
    #[arg(long)]
    pub t_grid: Option<usize>,
    /// Sample CSV for `--metric w2` between two files.
    #[arg(long)]
    pub samples: Option<PathBuf>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Aggregated CSV; defaults to `<output_dir>/sweep.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub force: bool,
}

/// Size the global worker pool from [`THREADS_ENV`] if set.
pub fn init_thread_pool() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(Error::config(format!("{THREADS_ENV} must be >= 1")));
        }
        // a pool may already exist (e.g. in tests); keep it
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn load_config(path: &std::path::Path, out: Option<&PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(o) = out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

/// Run a parsed command, printing a one-line summary on success.
pub fn run(cli: Cli) -> Result<()> {
    init_thread_pool()?;
    match cli.command {
        Command::Train(a) => {
            let mut cfg = load_config(&a.config, a.out.as_ref())?;
            if let Some(s) = a.seed {
                cfg.train.seed = s;
                cfg.validate()?;
            }
            let s = cmd_train(
                &cfg,
                TrainOptions {
                    deterministic: a.deterministic,
                    force: a.force,
                },
            )?;
            if s.skipped {
                println!("run {} already complete at {}", s.config_hash, s.run_dir.display());
            } else {
                println!("trained run {} -> {}", s.config_hash, s.run_dir.display());
            }
        }
        Command::Sample(a) => {
            let solver = a.solver.spec()?.unwrap_or_else(default_solver);
            let s = cmd_sample(&SampleOptions {
                ckpt: a.ckpt,
                solver,
                n: a.n,
                w: a.w,
                kappa_from: a.kappa_from,
                kappa_file: a.kappa_file,
                seed: a.seed,
                out: a.out.clone(),
                deterministic: a.deterministic,
                raw_weights: a.raw,
            })?;
            println!("{} samples -> {} ({}, nfe {})", s.n, a.out.display(), s.solver, s.nfe);
        }
        Command::Eval(a) => {
            let r = cmd_eval(&EvalOptions {
                ckpt: a.ckpt,
                metric: a.metric,
                solver: a.solver.spec()?,
                n: a.n,
                w: a.w,
                kappa_from: a.kappa_from,
                t_grid: a.t_grid,
                samples: a.samples,
                reference: a.reference,
                seed: a.seed,
                out: a.out,
                raw_weights: a.raw,
            })?;
            println!("{}", report_line(&r));
        }
        Command::Sweep(a) => {
            let cfg = load_config(&a.config, None)?;
            let rows = cmd_sweep(
                &cfg,
                TrainOptions {
                    deterministic: a.deterministic,
                    force: a.force,
                },
            )?;
            let out = a.out.unwrap_or_else(|| cfg.output_dir.join("sweep.csv"));
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            write_sweep_csv(&rows, &out)?;
            let failed = rows.iter().filter(|r| !r.error.is_empty()).count();
            println!("{} sweep rows -> {} ({failed} with errors)", rows.len(), out.display());
        }
    }
    Ok(())
}
