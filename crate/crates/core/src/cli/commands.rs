use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{config_hash, ExperimentConfig, KappaFrom, Metric};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::{train_with, write_history_csv, FlowModel, TrainConfig, TrainFailure};
use crate::metrics::{
    curvature, degree_of_intersection, model_coupling_sampler, sample_w2, wasserstein2, MetricReport, W2Method,
    MAX_EXACT_W2,
};
use crate::nn::{Checkpoint, Matrix};
use crate::solvers::{draw_kappa, sample_batch, KappaInput, SolverSpec};

pub const CKPT_FINAL: &str = "ckpt_final";
pub const CKPT_EMA: &str = "ckpt_ema";
pub const CKPT_LAST_GOOD: &str = "ckpt_last_good";
pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_RESOLVED: &str = "config.resolved";
pub const COMPLETE_MARKER: &str = "COMPLETE";

pub const DEFAULT_DOI_N: usize = 10_000;
pub const DEFAULT_T_GRID: usize = 32;
pub const DEFAULT_W2_N: usize = 2048;
pub const SLICED_PROJECTIONS: usize = 512;

/// Snapshot written every `checkpoint_interval` iterations.
pub fn snapshot_name(iteration: usize) -> String {
    format!("ckpt_iter_{iteration}")
}

/// Metadata stored in every checkpoint written by the runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub config_hash: String,
    pub dataset: Dataset,
    pub train: TrainConfig,
    pub iteration: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Record zero wall-clock times so reruns are byte-identical.
    pub deterministic: bool,
    /// Retrain even if the run directory is complete.
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub config_hash: String,
    /// The run directory was already complete and nothing was done.
    pub skipped: bool,
}

fn write_checkpoint(dir: &Path, name: &str, model: &FlowModel, step: u64, info: &RunInfo) -> Result<()> {
    let extra = serde_json::to_value(info)?;
    model.to_checkpoint(step, info.train.seed, extra)?.save(&dir.join(name))
}

/// Train one config into `output_dir/<hash>`.
pub fn cmd_train(cfg: &ExperimentConfig, opts: TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let hash = cfg.run_hash();
    let dir = cfg.output_dir.join(&hash);
    if dir.join(COMPLETE_MARKER).exists() && !opts.force {
        return Ok(TrainSummary {
            run_dir: dir,
            config_hash: hash,
            skipped: true,
        });
    }
    fs::create_dir_all(&dir)?;
    let _ = fs::remove_file(dir.join(COMPLETE_MARKER));
    fs::write(dir.join(CONFIG_RESOLVED), cfg.to_toml()?)?;

    let info = |iteration| RunInfo {
        config_hash: hash.clone(),
        dataset: cfg.dataset.clone(),
        train: cfg.train.clone(),
        iteration,
    };
    let result = train_with(cfg.train.clone(), cfg.dataset.clone(), !opts.deterministic, |it, model| {
        write_checkpoint(&dir, &snapshot_name(it), model, it as u64, &info(it))
    });
    match result {
        Ok(out) => {
            let n = cfg.train.iterations;
            write_history_csv(&out.history, fs::File::create(dir.join(HISTORY_FILE))?)?;
            write_checkpoint(&dir, CKPT_FINAL, &out.model, out.optimizer_step, &info(n))?;
            let mut ema_only = out.model.clone();
            ema_only.params = out.model.ema_store();
            write_checkpoint(&dir, CKPT_EMA, &ema_only, out.optimizer_step, &info(n))?;
            fs::write(dir.join(COMPLETE_MARKER), format!("{hash}\n"))?;
            Ok(TrainSummary {
                run_dir: dir,
                config_hash: hash,
                skipped: false,
            })
        }
        Err(TrainFailure {
            error,
            last_good,
            history,
        }) => {
            write_history_csv(&history, fs::File::create(dir.join(HISTORY_FILE))?)?;
            if let Some(model) = last_good {
                let it = history.last().map(|r| r.iter).unwrap_or(0);
                write_checkpoint(&dir, CKPT_LAST_GOOD, &model, 0, &info(it))?;
            }
            Err(error)
        }
    }
}

/// A checkpoint path or a run directory (which resolves to `ckpt_final`).
pub fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CKPT_FINAL)
    } else {
        path.to_path_buf()
    }
}

/// Load a model and the run metadata stored with it.
pub fn load_run(path: &Path) -> Result<(FlowModel, RunInfo)> {
    let ckpt = Checkpoint::load(&resolve_checkpoint(path))?;
    let model = FlowModel::from_checkpoint(&ckpt)?;
    let info: RunInfo = serde_json::from_value(FlowModel::checkpoint_extra(&ckpt))
        .map_err(|e| Error::Format(format!("checkpoint has no run metadata: {e}")))?;
    Ok((model, info))
}

/// Read a CSV of points, ignoring a `label` column if present.
pub fn read_points_csv(path: &Path) -> Result<Matrix> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let keep: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| *h != "label")
        .map(|(i, _)| i)
        .collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        for &i in &keep {
            let field = rec.get(i).unwrap_or("");
            data.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Input(format!("{}: `{field}` is not a number", path.display())))?,
            );
        }
        rows += 1;
    }
    Matrix::from_vec(rows, keep.len(), data)
}

/// A kappa file holds either a single `label` column or kappa coordinates.
pub fn read_kappa_csv(path: &Path) -> Result<KappaInput> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() == 1 && &headers[0] == "label" {
        let labels = rdr
            .records()
            .map(|r| {
                let r = r?;
                r[0].trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Input(format!("bad label `{}` in {}", &r[0], path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(KappaInput::Labels(labels));
    }
    Ok(KappaInput::Values(read_points_csv(path)?))
}

pub fn write_points_csv(points: &Matrix, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = (1..=points.cols()).map(|i| format!("x{i}")).collect();
    w.write_record(&header)?;
    for row in points.iter_rows() {
        w.write_record(row.iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

fn kappa_for<R: rand::Rng>(
    model: &FlowModel,
    dataset: &Dataset,
    from: KappaFrom,
    file: Option<&Path>,
    n: usize,
    rng: &mut R,
) -> Result<Option<KappaInput>> {
    match from {
        KappaFrom::None => Ok(None),
        KappaFrom::Dataset => {
            let mode = model
                .kappa_mode()
                .ok_or_else(|| Error::config("kappa requested but the model was trained with the independent coupling"))?;
            Ok(Some(draw_kappa(mode, dataset, n, rng)))
        }
        KappaFrom::File => {
            let path = file.ok_or_else(|| Error::config("--kappa-from file needs --kappa-file"))?;
            let k = read_kappa_csv(path)?;
            if k.len() != n {
                return Err(Error::config(format!("kappa file has {} rows, {n} samples requested", k.len())));
            }
            Ok(Some(k))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleOptions {
    pub ckpt: PathBuf,
    pub solver: SolverSpec,
    pub n: usize,
    pub w: f64,
    pub kappa_from: KappaFrom,
    pub kappa_file: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
    pub deterministic: bool,
    pub raw_weights: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub config_hash: String,
    pub solver: SolverSpec,
    pub nfe: usize,
    pub wall_clock_s: f64,
    pub n: usize,
    pub w: f64,
    pub kappa_from: KappaFrom,
    pub seed: u64,
    pub weights: String,
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write `n` samples as CSV plus a JSON sidecar next to it.
pub fn cmd_sample(opts: &SampleOptions) -> Result<SampleSidecar> {
    opts.solver.validate()?;
    let (model, info) = load_run(&opts.ckpt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let started = Instant::now();
    let kappa = kappa_for(&model, &info.dataset, opts.kappa_from, opts.kappa_file.as_deref(), opts.n, &mut rng)?;
    let out = sample_batch(&model, opts.n, opts.w, kappa.as_ref(), opts.solver, !opts.raw_weights, &mut rng)?;
    let elapsed = started.elapsed().as_secs_f64();
    write_points_csv(&out.samples, &opts.out)?;
    let sidecar = SampleSidecar {
        config_hash: info.config_hash,
        solver: opts.solver,
        nfe: out.nfe,
        wall_clock_s: if opts.deterministic { 0.0 } else { elapsed },
        n: opts.n,
        w: opts.w,
        kappa_from: opts.kappa_from,
        seed: opts.seed,
        weights: if opts.raw_weights { "raw" } else { "ema" }.into(),
    };
    fs::write(sidecar_path(&opts.out), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(sidecar)
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub ckpt: Option<PathBuf>,
    pub metric: Metric,
    pub solver: Option<SolverSpec>,
    pub n: Option<usize>,
    pub w: f64,
    pub kappa_from: KappaFrom,
    pub t_grid: Option<usize>,
    pub samples: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub raw_weights: bool,
}

impl EvalOptions {
    pub fn new(metric: Metric) -> Self {
        Self {
            ckpt: None,
            metric,
            solver: None,
            n: None,
            w: 0.0,
            kappa_from: KappaFrom::None,
            t_grid: None,
            samples: None,
            reference: None,
            seed: 0,
            out: None,
            raw_weights: false,
        }
    }
}

pub fn default_solver() -> SolverSpec {
    SolverSpec::Euler {
        steps: crate::metrics::DEFAULT_CURVATURE_STEPS,
    }
}

/// Evaluate a model (already loaded) without touching the filesystem.
pub fn evaluate_model(model: &FlowModel, info: &RunInfo, opts: &EvalOptions) -> Result<MetricReport> {
    let use_ema = !opts.raw_weights;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let solver = opts.solver.unwrap_or_else(default_solver);
    let (value, n, solver, details) = match opts.metric {
        Metric::Curvature => {
            let n = opts.n.unwrap_or(crate::metrics::DEFAULT_CURVATURE_N);
            let r = curvature(&model.field(use_ema), n, solver, &mut rng)?;
            (r.mean_curvature, n, Some(solver), Some(serde_json::json!({ "per_t_profile": r.per_t_profile })))
        }
        Metric::Doi => {
            let n = opts.n.unwrap_or(DEFAULT_DOI_N);
            let t_grid = opts.t_grid.unwrap_or(DEFAULT_T_GRID);
            let sampler = model_coupling_sampler(model, &info.dataset, use_ema);
            let v = degree_of_intersection(&model.field(use_ema), sampler, n, t_grid, &mut rng)?;
            (v, n, None, Some(serde_json::json!({ "t_grid": t_grid, "coupling": format!("{:?}", model.regime) })))
        }
        Metric::W2 => {
            let n = opts.n.unwrap_or(DEFAULT_W2_N);
            let with_kappa = match opts.kappa_from {
                KappaFrom::None => false,
                KappaFrom::Dataset => true,
                KappaFrom::File => return Err(Error::config("w2 evaluation draws kappa from the dataset, not a file")),
            };
            let method = if n <= MAX_EXACT_W2 {
                W2Method::ExactAssignment
            } else {
                W2Method::Sliced {
                    n_projections: SLICED_PROJECTIONS,
                    seed: opts.seed,
                }
            };
            let (v, nfe) = sample_w2(model, &info.dataset, n, opts.w, with_kappa, solver, method, opts.seed)?;
            (v, n, Some(solver), Some(serde_json::json!({ "nfe": nfe, "w": opts.w, "method": method })))
        }
    };
    Ok(MetricReport {
        metric: opts.metric.name().into(),
        value,
        n,
        solver,
        seed: opts.seed,
        config_hash: info.config_hash.clone(),
        details,
    })
}

/// Run one metric and write the JSON report to `opts.out` when given.
pub fn cmd_eval(opts: &EvalOptions) -> Result<MetricReport> {
    let report = if opts.samples.is_some() || opts.reference.is_some() {
        let (Metric::W2, Some(a), Some(b)) = (opts.metric, &opts.samples, &opts.reference) else {
            return Err(Error::config("--samples and --reference go together and only with --metric w2"));
        };
        let (a_pts, b_pts) = (read_points_csv(a)?, read_points_csv(b)?);
        let method = if a_pts.rows() == b_pts.rows() && a_pts.rows() <= MAX_EXACT_W2 {
            W2Method::ExactAssignment
        } else {
            W2Method::Sliced {
                n_projections: SLICED_PROJECTIONS,
                seed: opts.seed,
            }
        };
        let hash = match &opts.ckpt {
            Some(p) => load_run(p)?.1.config_hash,
            None => String::new(),
        };
        MetricReport {
            metric: "w2".into(),
            value: wasserstein2(&a_pts, &b_pts, method)?,
            n: a_pts.rows(),
            solver: None,
            seed: opts.seed,
            config_hash: hash,
            details: Some(serde_json::json!({ "method": method })),
        }
    } else {
        let ckpt = opts
            .ckpt
            .as_ref()
            .ok_or_else(|| Error::config("--ckpt is required for this metric"))?;
        let (model, info) = load_run(ckpt)?;
        evaluate_model(&model, &info, opts)?
    };
    if let Some(out) = &opts.out {
        fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(report)
}

pub fn report_line(r: &MetricReport) -> String {
    let solver = r.solver.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
    format!(
        "{} = {:.6} (n={}, solver={}, seed={}, config={})",
        r.metric, r.value, r.n, solver, r.seed, r.config_hash
    )
}

/// Hash of a bare training setup, for callers outside a config file.
pub fn run_hash(dataset: &Dataset, train: &TrainConfig) -> String {
    config_hash(dataset, train)
}
