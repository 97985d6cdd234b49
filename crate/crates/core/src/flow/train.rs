use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{batch_loss_on_tape, KlTarget, LossValues};
use super::model::{FlowModel, ModelConfig};
use crate::coupling::{CouplingRegime, KappaMode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{lr_schedule, Adam, Tape};

/// Stream of the training RNG; initialization uses stream 0 of the same seed.
pub const TRAIN_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: CouplingRegime,
    #[serde(default = "default_kappa")]
    pub kappa: KappaMode,
    /// KL weight. Ignored by the independent regime.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub kl_target: KlTarget,
    /// Global gradient-norm clip; `0` disables clipping.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_log_interval")]
    pub log_interval: usize,
    #[serde(default = "default_checkpoint_interval")]
    pub checkpoint_interval: usize,
    #[serde(default)]
    pub model: ModelConfig,
}

fn default_kappa() -> KappaMode {
    KappaMode::DataSample
}
fn default_beta() -> f64 {
    1e-5
}
fn default_iterations() -> usize {
    20_000
}
fn default_batch_size() -> usize {
    256
}
fn default_lr() -> f64 {
    1e-3
}
fn default_warmup() -> usize {
    500
}
fn default_ema_decay() -> f64 {
    0.999
}
fn default_grad_clip() -> f64 {
    10.0
}
fn default_log_interval() -> usize {
    100
}
fn default_checkpoint_interval() -> usize {
    5000
}

impl TrainConfig {
    pub fn new(regime: CouplingRegime, kappa: KappaMode) -> Self {
        Self {
            regime,
            kappa,
            beta: default_beta(),
            iterations: default_iterations(),
            batch_size: default_batch_size(),
            lr: default_lr(),
            warmup_steps: default_warmup(),
            ema_decay: default_ema_decay(),
            seed: 0,
            kl_target: KlTarget::default(),
            grad_clip: default_grad_clip(),
            log_interval: default_log_interval(),
            checkpoint_interval: default_checkpoint_interval(),
            model: ModelConfig::default(),
        }
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        dataset.validate()?;
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::config(format!("train.beta must be finite and >= 0, got {}", self.beta)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be >= 1"));
        }
        if !positive(self.lr) {
            return Err(Error::config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config(format!("train.ema_decay must be in [0, 1), got {}", self.ema_decay)));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::config("train.grad_clip must be >= 0 (0 disables)"));
        }
        if self.log_interval == 0 || self.checkpoint_interval == 0 {
            return Err(Error::config("train.log_interval and train.checkpoint_interval must be >= 1"));
        }
        if self.regime != CouplingRegime::Independent {
            match self.kappa {
                KappaMode::ClassLabel { num_classes, embed_dim } => {
                    if num_classes != dataset.n_classes() {
                        return Err(Error::config(format!(
                            "train.kappa.num_classes is {num_classes} but the dataset has {} classes",
                            dataset.n_classes()
                        )));
                    }
                    if embed_dim == 0 {
                        return Err(Error::config("train.kappa.embed_dim must be >= 1"));
                    }
                }
                KappaMode::IndependentNoise { dim: 0 } => {
                    return Err(Error::config("train.kappa.dim must be >= 1"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// `(init, train)` generators for a seed.
pub fn seeded_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let init = ChaCha8Rng::seed_from_u64(seed);
    let mut train = ChaCha8Rng::seed_from_u64(seed);
    train.set_stream(TRAIN_STREAM);
    (init, train)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub recon_loss: f64,
    pub kl_loss: f64,
    pub beta: f64,
    pub lr: f64,
    pub wall_clock_s: f64,
}

/// Write history rows as CSV with header `iter,recon_loss,kl_loss,beta,lr,wall_clock_s`.
pub fn write_history_csv<W: Write>(rows: &[HistoryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "recon_loss", "kl_loss", "beta", "lr", "wall_clock_s"])?;
    for r in rows {
        w.write_record([
            r.iter.to_string(),
            format!("{:?}", r.recon_loss),
            format!("{:?}", r.kl_loss),
            format!("{:?}", r.beta),
            format!("{:?}", r.lr),
            format!("{:?}", r.wall_clock_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Stateful training loop; [`train`] drives it to completion.
pub struct Trainer {
    config: TrainConfig,
    dataset: Dataset,
    model: FlowModel,
    adam: Adam,
    rng: ChaCha8Rng,
    iteration: usize,
    history: Vec<HistoryRow>,
    window: (f64, f64, usize),
    started: Instant,
    record_clock: bool,
    last_good: FlowModel,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: Dataset) -> Result<Self> {
        config.validate(&dataset)?;
        let (mut init, rng) = seeded_rngs(config.seed);
        let model = FlowModel::new(
            dataset.dim(),
            config.regime,
            config.kappa,
            &config.model,
            config.ema_decay,
            &mut init,
        )?;
        Ok(Self {
            last_good: model.clone(),
            config,
            dataset,
            model,
            adam: Adam::default(),
            rng,
            iteration: 0,
            history: Vec::new(),
            window: (0.0, 0.0, 0),
            started: Instant::now(),
            record_clock: true,
        })
    }

    /// With `false`, history records a wall clock of 0 so reruns are
    /// byte-identical.
    pub fn record_wall_clock(mut self, on: bool) -> Self {
        self.record_clock = on;
        self
    }

    pub fn model(&self) -> &FlowModel {
        &self.model
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    pub fn optimizer_step(&self) -> u64 {
        self.adam.step_count()
    }

    /// One optimization step. Errors carry the 1-based iteration index.
    pub fn step(&mut self) -> Result<LossValues> {
        let it = self.iteration + 1;
        self.step_inner().map_err(|e| e.at_iteration(it))
    }

    fn step_inner(&mut self) -> Result<LossValues> {
        let cfg = &self.config;
        let lr = lr_schedule((self.iteration + 1) as i64, cfg.warmup_steps as i64, cfg.lr)?;
        let batch = self.dataset.draw_batch(cfg.batch_size, &mut self.rng);
        let mut tape = Tape::new();
        let (terms, values) = batch_loss_on_tape(&mut tape, &self.model, &batch, cfg.beta, cfg.kl_target, &mut self.rng)?;
        self.model.params.zero_grads();
        tape.backward(terms.total, &mut self.model.params)?;
        if cfg.grad_clip > 0.0 {
            self.model.params.clip_grad_norm(cfg.grad_clip);
        }
        self.adam.step(&mut self.model.params, lr)?;
        self.model.ema.update(&self.model.params)?;
        self.iteration += 1;

        self.window.0 += values.recon;
        self.window.1 += values.kl;
        self.window.2 += 1;
        if self.iteration.is_multiple_of(cfg.log_interval) {
            let k = self.window.2 as f64;
            self.history.push(HistoryRow {
                iter: self.iteration,
                recon_loss: self.window.0 / k,
                kl_loss: self.window.1 / k,
                beta: cfg.beta,
                lr,
                wall_clock_s: if self.record_clock {
                    self.started.elapsed().as_secs_f64()
                } else {
                    0.0
                },
            });
            self.window = (0.0, 0.0, 0);
        }
        if self.iteration.is_multiple_of(cfg.checkpoint_interval) {
            self.last_good = self.model.clone();
        }
        Ok(values)
    }

    pub fn into_output(self) -> TrainOutput {
        TrainOutput {
            optimizer_step: self.adam.step_count(),
            model: self.model,
            history: self.history,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: FlowModel,
    pub history: Vec<HistoryRow>,
    pub optimizer_step: u64,
}

/// A failed run: the error plus the most recent checkpoint-interval snapshot
/// (or the initial weights) and the history up to the failure.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub last_good: Option<Box<FlowModel>>,
    pub history: Vec<HistoryRow>,
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        Self {
            error,
            last_good: None,
            history: Vec::new(),
        }
    }
}

impl From<TrainFailure> for Error {
    fn from(f: TrainFailure) -> Self {
        f.error
    }
}

/// Run `config.iterations` steps. `on_checkpoint` sees the model every
/// `checkpoint_interval` iterations (not at iteration 0).
pub fn train_with(
    config: TrainConfig,
    dataset: Dataset,
    record_wall_clock: bool,
    mut on_checkpoint: impl FnMut(usize, &FlowModel) -> Result<()>,
) -> std::result::Result<TrainOutput, TrainFailure> {
    let mut trainer = Trainer::new(config, dataset)?.record_wall_clock(record_wall_clock);
    let (total, every) = (trainer.config.iterations, trainer.config.checkpoint_interval);
    while trainer.iteration < total {
        if let Err(error) = trainer.step() {
            return Err(TrainFailure {
                error,
                last_good: Some(Box::new(trainer.last_good)),
                history: trainer.history,
            });
        }
        if trainer.iteration % every == 0 {
            on_checkpoint(trainer.iteration, &trainer.model)?;
        }
    }
    Ok(trainer.into_output())
}

pub fn train(config: TrainConfig, dataset: Dataset) -> std::result::Result<TrainOutput, TrainFailure> {
    train_with(config, dataset, true, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    fn tiny(regime: CouplingRegime) -> TrainConfig {
        let mut c = TrainConfig::new(regime, KappaMode::DataSample);
        c.model = ModelConfig {
            hidden_dims: vec![16, 16],
            time_embed_dim: 4,
            source_hidden_dims: vec![16],
            activation: Activation::SiLU,
        };
        c.batch_size = 32;
        c.log_interval = 5;
        c.warmup_steps = 5;
        c
    }

    #[test]
    fn zero_iterations_returns_initial_weights() {
        let mut c = tiny(CouplingRegime::MixFlow);
        c.iterations = 0;
        let out = train(c.clone(), Dataset::eight_gaussians()).unwrap();
        assert!(out.history.is_empty());
        let (mut init, _) = seeded_rngs(c.seed);
        let fresh = FlowModel::new(2, c.regime, c.kappa, &c.model, c.ema_decay, &mut init).unwrap();
        assert_eq!(out.model, fresh);
    }

    #[test]
    fn history_rows_at_log_interval() {
        let mut c = tiny(CouplingRegime::MixFlow);
        c.iterations = 20;
        let out = train(c, Dataset::two_moons()).unwrap();
        let iters: Vec<_> = out.history.iter().map(|r| r.iter).collect();
        assert_eq!(iters, vec![5, 10, 15, 20]);
        assert_eq!(out.optimizer_step, 20);
        assert!(out.history.iter().all(|r| r.recon_loss.is_finite() && r.kl_loss.is_finite()));
    }

    #[test]
    fn deterministic_history_csv() {
        let mut c = tiny(CouplingRegime::KappaFC);
        c.iterations = 10;
        let run = || {
            let out = train_with(c.clone(), Dataset::eight_gaussians(), false, |_, _| Ok(())).unwrap();
            let mut buf = Vec::new();
            write_history_csv(&out.history, &mut buf).unwrap();
            buf
        };
        let a = run();
        assert_eq!(a, run());
        assert!(String::from_utf8(a).unwrap().starts_with("iter,recon_loss,kl_loss,beta,lr,wall_clock_s\n"));
    }

    #[test]
    fn divergence_reports_iteration_and_keeps_last_good() {
        let mut c = tiny(CouplingRegime::Independent);
        c.iterations = 10;
        c.checkpoint_interval = 2;
        c.lr = 1e300;
        c.grad_clip = 0.0;
        c.warmup_steps = 0;
        match train(c, Dataset::eight_gaussians()) {
            Err(TrainFailure { error: Error::Divergence { iteration: Some(i), .. }, last_good, .. }) => {
                assert!(i >= 2);
                assert!(last_good.unwrap().params.iter().all(|(_, p)| p.value.all_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn label_mode_must_match_dataset_classes() {
        let mut c = tiny(CouplingRegime::MixFlow);
        c.kappa = KappaMode::ClassLabel { num_classes: 3, embed_dim: 4 };
        assert!(matches!(c.validate(&Dataset::eight_gaussians()), Err(Error::Config(_))));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = tiny(CouplingRegime::MixFlow);
        let text = toml::to_string(&c).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }
}
