use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::commands::{cmd_train, default_solver, evaluate_model, load_run, snapshot_name, EvalOptions, TrainOptions};
use super::config::{EvalSpec, ExperimentConfig, Metric};
use crate::coupling::KappaMode;
use crate::error::{Error, Result};
use crate::solvers::SolverSpec;

/// One aggregated cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub beta: f64,
    pub kappa: String,
    pub w: f64,
    pub solver: String,
    pub nfe: Option<usize>,
    /// 0 means the final checkpoint.
    pub checkpoint_iteration: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
    /// Per-seed values separated by `;`.
    pub values: String,
    pub error: String,
}

fn solver_variants(axes_solver: &[String], axes_nfe: &[usize], spec: &EvalSpec) -> Vec<Result<SolverSpec>> {
    let default_for = |kind: &str| -> Result<SolverSpec> {
        match kind {
            "euler" => Ok(SolverSpec::Euler { steps: 128 }),
            "heun2" => Ok(SolverSpec::Heun2 { steps: 64 }),
            "rk45" => Ok(SolverSpec::rk45()),
            other => Err(Error::config(format!("unknown solver `{other}`"))),
        }
    };
    match (axes_solver.is_empty(), axes_nfe.is_empty()) {
        (true, true) => vec![Ok(spec.solver.unwrap_or_else(default_solver))],
        (false, true) => axes_solver.iter().map(|k| default_for(k)).collect(),
        (_, false) => {
            let kinds: Vec<&str> = if axes_solver.is_empty() {
                vec!["euler"]
            } else {
                axes_solver.iter().map(String::as_str).collect()
            };
            let mut out = Vec::new();
            for kind in kinds {
                if kind == "rk45" {
                    out.push(Ok(SolverSpec::rk45()));
                    continue;
                }
                for &nfe in axes_nfe {
                    out.push(SolverSpec::with_nfe(kind, nfe));
                }
            }
            out
        }
    }
}

fn axis_or<T: Clone>(axis: &[T], base: T) -> Vec<T> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

struct TrainCell {
    beta: f64,
    kappa: KappaMode,
    seed: u64,
    run: Result<PathBuf>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Train every (beta, kappa, seed) cell, evaluate the cross product of the
/// evaluation axes, and aggregate over seeds. Cell failures are recorded in
/// the row; the sweep continues.
pub fn cmd_sweep(cfg: &ExperimentConfig, opts: TrainOptions) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let axes = &cfg.sweep;
    let betas = axis_or(&axes.beta, cfg.train.beta);
    let kappas = axis_or(&axes.kappa, cfg.train.kappa);
    let seeds = axis_or(&axes.seed, cfg.train.seed);

    let mut cells = Vec::new();
    for &beta in &betas {
        for &kappa in &kappas {
            for &seed in &seeds {
                cells.push((beta, kappa, seed));
            }
        }
    }
    let trained: Vec<TrainCell> = cells
        .par_iter()
        .map(|&(beta, kappa, seed)| {
            let mut c = cfg.clone();
            c.train.beta = beta;
            c.train.kappa = kappa;
            c.train.seed = seed;
            let run = cmd_train(&c, opts).map(|s| s.run_dir);
            TrainCell { beta, kappa, seed, run }
        })
        .collect();

    let evals = if cfg.eval.is_empty() {
        vec![EvalSpec::new(Metric::W2)]
    } else {
        cfg.eval.clone()
    };
    let ckpt_iters = axis_or(&axes.checkpoint_iteration, 0);

    struct Job {
        beta: f64,
        kappa: KappaMode,
        w: f64,
        solver: Result<SolverSpec>,
        ckpt_iter: usize,
        spec: EvalSpec,
    }
    let mut jobs = Vec::new();
    for &beta in &betas {
        for &kappa in &kappas {
            for spec in &evals {
                for w in axis_or(&axes.w, spec.w) {
                    for solver in solver_variants(&axes.solver, &axes.nfe, spec) {
                        for &ckpt_iter in &ckpt_iters {
                            jobs.push(Job {
                                beta,
                                kappa,
                                w,
                                solver: solver.as_ref().map(|s| *s).map_err(|e| Error::config(e.to_string())),
                                ckpt_iter,
                                spec: spec.clone(),
                            });
                        }
                    }
                }
            }
        }
    }

    let rows = jobs
        .par_iter()
        .map(|job| {
            let mut values = Vec::new();
            let mut errors = Vec::new();
            let solver = match &job.solver {
                Ok(s) => Some(*s),
                Err(e) => {
                    errors.push(e.to_string());
                    None
                }
            };
            if let Some(solver) = solver {
                for cell in trained.iter().filter(|c| c.beta == job.beta && c.kappa == job.kappa) {
                    let dir = match &cell.run {
                        Ok(d) => d,
                        Err(e) => {
                            errors.push(format!("seed {}: training failed: {e}", cell.seed));
                            continue;
                        }
                    };
                    let ckpt = if job.ckpt_iter == 0 {
                        dir.clone()
                    } else {
                        dir.join(snapshot_name(job.ckpt_iter))
                    };
                    for &eval_seed in &job.spec.seeds {
                        let opts = EvalOptions {
                            ckpt: None,
                            metric: job.spec.metric,
                            solver: Some(solver),
                            n: job.spec.n,
                            w: job.w,
                            kappa_from: job.spec.kappa_from,
                            t_grid: job.spec.t_grid,
                            samples: None,
                            reference: None,
                            seed: eval_seed,
                            out: None,
                            raw_weights: false,
                        };
                        match load_run(&ckpt).and_then(|(m, info)| evaluate_model(&m, &info, &opts)) {
                            Ok(r) => values.push(r.value),
                            Err(e) => errors.push(format!("seed {}: {e}", cell.seed)),
                        }
                    }
                }
            }
            let (mean, std) = if values.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                mean_std(&values)
            };
            SweepRow {
                beta: job.beta,
                kappa: job.kappa.short_name().into(),
                w: job.w,
                solver: solver.map(|s| s.to_string()).unwrap_or_default(),
                nfe: solver.and_then(|s| s.fixed_nfe()),
                checkpoint_iteration: job.ckpt_iter,
                metric: job.spec.metric.name().into(),
                mean,
                std,
                n_seeds: values.len(),
                values: values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(";"),
                error: errors.join(" | "),
            }
        })
        .collect();
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "beta",
            "kappa",
            "w",
            "solver",
            "nfe",
            "checkpoint_iteration",
            "metric",
            "mean",
            "std",
            "n_seeds",
            "values",
            "error",
        ])?;
    }
    w.flush()?;
    Ok(())
}
