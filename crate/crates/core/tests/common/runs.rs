//! Trained reference runs, cached on disk by config hash so repeated test
//! invocations train each configuration once.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, LazyLock, Mutex};

use mixflow::cli::{cmd_train, load_run, snapshot_name, ExperimentConfig, TrainOptions};
use mixflow::coupling::{CouplingRegime, KappaMode};
use mixflow::data::Dataset;
use mixflow::flow::{FlowModel, ModelConfig, TrainConfig};
use mixflow::metrics::{curvature_default, sample_w2, W2Method};
use mixflow::nn::Activation;
use mixflow::solvers::SolverSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const ITERATIONS: usize = 20_000;
pub const BATCH: usize = 256;
pub const SNAPSHOT_EVERY: usize = 1000;
pub const SEEDS: [u64; 3] = [0, 1, 2];
/// Seed of every evaluation draw, shared by all models so comparisons see
/// the same reference set and the same initial noise.
pub const EVAL_SEED: u64 = 1234;
/// Generated and held-out points per W2 evaluation (exact matching).
pub const W2_N: usize = 2048;

/// Network size used for every reference run.
pub fn model_config() -> ModelConfig {
    ModelConfig {
        hidden_dims: vec![64, 64, 64],
        time_embed_dim: 16,
        source_hidden_dims: vec![64, 64],
        activation: Activation::SiLU,
    }
}

pub fn train_config(regime: CouplingRegime, kappa: KappaMode, beta: f64, seed: u64) -> TrainConfig {
    let mut t = TrainConfig::new(regime, kappa);
    t.beta = beta;
    t.seed = seed;
    t.iterations = ITERATIONS;
    t.batch_size = BATCH;
    t.checkpoint_interval = SNAPSHOT_EVERY;
    t.model = model_config();
    t
}

pub fn runs_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("mixflow-reference-runs")
}

static LOCKS: LazyLock<Mutex<HashMap<String, Arc<Mutex<()>>>>> = LazyLock::new(Default::default);

/// Train (or reuse) a run and return its directory.
pub fn ensure(dataset: &Dataset, train: &TrainConfig) -> PathBuf {
    let cfg = experiment(dataset, train);
    let lock = LOCKS
        .lock()
        .unwrap()
        .entry(cfg.run_hash())
        .or_default()
        .clone();
    let _guard = lock.lock().unwrap();
    let opts = TrainOptions {
        deterministic: true,
        force: false,
    };
    cmd_train(&cfg, opts).expect("reference training run").run_dir
}

/// Final model of a run (EMA weights are inside).
pub fn model(dataset: &Dataset, train: &TrainConfig) -> FlowModel {
    load_run(&ensure(dataset, train)).unwrap().0
}

/// Snapshot at `iteration` (a multiple of [`SNAPSHOT_EVERY`]).
pub fn snapshot(dataset: &Dataset, train: &TrainConfig, iteration: usize) -> FlowModel {
    let dir = ensure(dataset, train);
    if iteration == train.iterations {
        return load_run(&dir).unwrap().0;
    }
    load_run(&dir.join(snapshot_name(iteration))).unwrap().0
}

pub fn rf(seed: u64) -> TrainConfig {
    train_config(CouplingRegime::Independent, KappaMode::DataSample, 1e-5, seed)
}

pub fn mixflow(kappa: KappaMode, beta: f64, seed: u64) -> TrainConfig {
    train_config(CouplingRegime::MixFlow, kappa, beta, seed)
}

pub fn kappa_fc(beta: f64, seed: u64) -> TrainConfig {
    train_config(CouplingRegime::KappaFC, KappaMode::DataSample, beta, seed)
}

/// Class labels embedded in as many dimensions as the data.
pub fn label_kappa() -> KappaMode {
    KappaMode::ClassLabel {
        num_classes: 8,
        embed_dim: 2,
    }
}

pub fn noise_kappa() -> KappaMode {
    KappaMode::IndependentNoise { dim: 2 }
}

fn experiment(dataset: &Dataset, train: &TrainConfig) -> ExperimentConfig {
    ExperimentConfig {
        output_dir: runs_root(),
        dataset: dataset.clone(),
        train: train.clone(),
        eval: Vec::new(),
        sweep: Default::default(),
    }
}

static METRICS: LazyLock<Mutex<HashMap<String, f64>>> = LazyLock::new(Default::default);

fn memo(key: String, compute: impl FnOnce() -> f64) -> f64 {
    if let Some(v) = METRICS.lock().unwrap().get(&key) {
        return *v;
    }
    let v = compute();
    METRICS.lock().unwrap().insert(key, v);
    v
}

/// W2 between samples of the snapshot at `iteration` (Euler with `steps`
/// steps, mixture weight `w`, kappa drawn from the dataset when `w > 0`)
/// and held-out data.
pub fn w2_at(dataset: &Dataset, train: &TrainConfig, iteration: usize, steps: usize, w: f64) -> f64 {
    let key = format!("w2/{}/{iteration}/{steps}/{w}", experiment(dataset, train).run_hash());
    memo(key, || {
        let m = snapshot(dataset, train, iteration);
        let solver = SolverSpec::Euler { steps };
        sample_w2(&m, dataset, W2_N, w, w > 0.0, solver, W2Method::ExactAssignment, EVAL_SEED)
            .unwrap()
            .0
    })
}

/// W2 of the final model sampled from `N(0, I)`.
pub fn w2(dataset: &Dataset, train: &TrainConfig, steps: usize) -> f64 {
    w2_at(dataset, train, train.iterations, steps, 0.0)
}

/// Curvature of the final EMA model with the default evaluation settings.
pub fn curvature(dataset: &Dataset, train: &TrainConfig) -> f64 {
    let key = format!("curvature/{}", experiment(dataset, train).run_hash());
    memo(key, || {
        let m = model(dataset, train);
        curvature_default(&m.field(true), &mut ChaCha8Rng::seed_from_u64(EVAL_SEED))
            .unwrap()
            .mean_curvature
    })
}
