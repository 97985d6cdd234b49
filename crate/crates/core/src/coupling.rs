//! Learnable forward couplings.
//!
//! A [`SourcePredictor`] maps a conditioning signal `kappa` to a diagonal
//! Gaussian over source points. [`draw_pairs`] turns a batch of targets into
//! `(x0, x1)` training pairs under one of three regimes:
//!
//! - `Independent`: `x0 ~ N(0, I)`, nothing learned.
//! - `KappaFC`: `x0 ~ N(mu(kappa), Sigma(kappa))`.
//! - `MixFlow`: `w ~ U(0, 1)` per example, `x0 ~ N(w mu, w Sigma + (1 - w) I)`.
//!
//! Random draws happen in a fixed order per batch: kappa noise (noise mode
//! only), then mixture weights (MixFlow only), then the source noise.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::distributions::{standard_normal_matrix, DiagGaussian, GaussianVars};
use crate::error::{Error, Result};
use crate::nn::{Activation, Matrix, Mlp, MlpSpec, ParamSource, ParamStore, Tape, Var};

pub const SOURCE_PREFIX: &str = "phi";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum KappaMode {
    /// `kappa = x1`.
    DataSample,
    /// Learnable embedding row of the class label.
    ClassLabel { num_classes: usize, embed_dim: usize },
    /// Fresh `N(0, I_dim)` draw independent of `x1`.
    IndependentNoise { dim: usize },
}

impl KappaMode {
    pub fn kappa_dim(&self, data_dim: usize) -> usize {
        match *self {
            KappaMode::DataSample => data_dim,
            KappaMode::ClassLabel { embed_dim, .. } => embed_dim,
            KappaMode::IndependentNoise { dim } => dim,
        }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            KappaMode::DataSample => "sample",
            KappaMode::ClassLabel { .. } => "label",
            KappaMode::IndependentNoise { .. } => "noise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CouplingRegime {
    Independent,
    KappaFC,
    MixFlow,
}

/// `q_phi(x0 | kappa)`: network emitting `[mean | log_var]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourcePredictor {
    pub mode: KappaMode,
    pub data_dim: usize,
    pub mlp: Mlp,
}

impl SourcePredictor {
    pub fn new(mode: KappaMode, data_dim: usize, hidden: Vec<usize>, activation: Activation) -> Result<Self> {
        if let KappaMode::ClassLabel { num_classes: 0, .. } = mode {
            return Err(Error::config("class-label conditioning needs at least one class"));
        }
        let spec = MlpSpec {
            input_dim: mode.kappa_dim(data_dim),
            hidden_dims: hidden,
            output_dim: 2 * data_dim,
            activation,
            time_embed_dim: 0,
        };
        Ok(Self {
            mode,
            data_dim,
            mlp: Mlp::new(spec, SOURCE_PREFIX)?,
        })
    }

    pub fn embedding_name() -> String {
        format!("{SOURCE_PREFIX}.embed")
    }

    /// Kaiming init for hidden layers, zero output layer (so the initial
    /// prediction is exactly `N(0, I)`), `N(0, 1)` label embeddings.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.mlp.init(store, rng)?;
        self.mlp.zero_output_layer(store)?;
        if let KappaMode::ClassLabel {
            num_classes,
            embed_dim,
        } = self.mode
        {
            let table = standard_normal_matrix(rng, num_classes, embed_dim);
            store.insert(Self::embedding_name(), table)?;
        }
        Ok(())
    }

    /// Value-level kappa for a single example.
    pub fn build_kappa<R: Rng + ?Sized>(
        &self,
        params: &(impl ParamSource + ?Sized),
        x1: &[f64],
        label: Option<usize>,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let batch = Batch {
            x1: Matrix::row_vector(x1),
            labels: vec![label.unwrap_or(0)],
        };
        if matches!(self.mode, KappaMode::ClassLabel { .. }) && label.is_none() {
            return Err(Error::Input("class-label conditioning needs a label".into()));
        }
        let mut tape = Tape::new();
        let k = self.kappa_on_tape(&mut tape, params, &batch, false, rng)?;
        Ok(tape.value(k).as_slice().to_vec())
    }

    /// Records kappa for every row of `batch`. With `trainable`, label
    /// embeddings are parameter leaves.
    pub fn kappa_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        params: &(impl ParamSource + ?Sized),
        batch: &Batch,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if batch.x1.cols() != self.data_dim {
            return Err(Error::shape(format!(
                "targets have {} coordinates, predictor expects {}",
                batch.x1.cols(),
                self.data_dim
            )));
        }
        match self.mode {
            KappaMode::DataSample => Ok(tape.constant(batch.x1.clone())),
            KappaMode::ClassLabel { num_classes, .. } => {
                if let Some(&bad) = batch.labels.iter().find(|&&l| l >= num_classes) {
                    return Err(Error::Input(format!(
                        "label {bad} outside [0, {num_classes})"
                    )));
                }
                let table = if trainable {
                    tape.param(params, &Self::embedding_name())?
                } else {
                    tape.frozen_param(params, &Self::embedding_name())?
                };
                tape.gather_rows(table, &batch.labels)
            }
            KappaMode::IndependentNoise { dim } => {
                Ok(tape.constant(standard_normal_matrix(rng, batch.len(), dim)))
            }
        }
    }

    pub fn predict_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        kappa: Var,
    ) -> Result<GaussianVars> {
        self.check_kappa(tape.value(kappa))?;
        let out = self.mlp.forward_tape(tape, params, kappa, None)?;
        Ok(GaussianVars {
            mean: tape.columns(out, 0, self.data_dim)?,
            log_var: tape.columns(out, self.data_dim, self.data_dim)?,
        })
    }

    fn check_kappa(&self, kappa: &Matrix) -> Result<()> {
        let want = self.mode.kappa_dim(self.data_dim);
        if kappa.cols() != want {
            return Err(Error::config(format!(
                "kappa has {} coordinates, predictor was configured for {want}",
                kappa.cols()
            )));
        }
        Ok(())
    }

    /// Batched prediction returning `(mean, log_var)` matrices.
    pub fn predict_batch(&self, params: &(impl ParamSource + ?Sized), kappa: &Matrix) -> Result<(Matrix, Matrix)> {
        self.check_kappa(kappa)?;
        let out = self.mlp.forward(params, kappa, None)?;
        Ok((out.columns(0, self.data_dim), out.columns(self.data_dim, self.data_dim)))
    }

    pub fn predict_source(&self, params: &(impl ParamSource + ?Sized), kappa: &[f64]) -> Result<DiagGaussian> {
        let (mean, log_var) = self.predict_batch(params, &Matrix::row_vector(kappa))?;
        DiagGaussian::new(mean.into_vec(), log_var.into_vec())
            .map_err(|e| Error::Evaluation(format!("source prediction: {e}")))
    }
}

/// Tape nodes of one drawn batch of pairs.
#[derive(Debug, Clone)]
pub struct PairDraw {
    pub x0: Var,
    pub x1: Var,
    pub kappa: Option<Var>,
    /// Mixture weight per example: 0 for `Independent`, 1 for `KappaFC`.
    pub w: Vec<f64>,
    /// `N(mu(kappa), Sigma(kappa))` before mixing.
    pub base: Option<GaussianVars>,
    /// The distribution `x0` was actually drawn from.
    pub source: Option<GaussianVars>,
}

/// Record a batch of training pairs on `tape`.
///
/// `weights` overrides the MixFlow weight draw (used to pin `w` in tests and
/// for sampling sweeps); it is ignored for the other regimes.
pub fn draw_pairs_on_tape<R: Rng + ?Sized>(
    tape: &mut Tape,
    regime: CouplingRegime,
    predictor: Option<&SourcePredictor>,
    params: &ParamStore,
    batch: &Batch,
    weights: Option<&[f64]>,
    rng: &mut R,
) -> Result<PairDraw> {
    if batch.is_empty() {
        return Err(Error::Input("cannot draw pairs for an empty batch".into()));
    }
    let n = batch.len();
    let d = batch.x1.cols();
    let x1 = tape.constant(batch.x1.clone());

    if regime == CouplingRegime::Independent {
        let x0 = tape.constant(standard_normal_matrix(rng, n, d));
        return Ok(PairDraw {
            x0,
            x1,
            kappa: None,
            w: vec![0.0; n],
            base: None,
            source: None,
        });
    }

    let predictor = predictor
        .ok_or_else(|| Error::config(format!("{regime:?} coupling needs a source predictor")))?;
    let kappa = predictor.kappa_on_tape(tape, params, batch, true, rng)?;
    let base = predictor.predict_on_tape(tape, params, kappa)?;

    let w: Vec<f64> = match regime {
        CouplingRegime::KappaFC => vec![1.0; n],
        CouplingRegime::MixFlow => match weights {
            Some(w) if w.len() == n => w.to_vec(),
            Some(w) => {
                return Err(Error::shape(format!("{} weights for {n} examples", w.len())))
            }
            None => (0..n).map(|_| rng.random::<f64>()).collect(),
        },
        CouplingRegime::Independent => unreachable!(),
    };
    let source = if regime == CouplingRegime::KappaFC {
        base
    } else {
        base.mix(tape, &w)?
    };
    let eps = standard_normal_matrix(rng, n, d);
    let x0 = source.sample(tape, eps)?;
    Ok(PairDraw {
        x0,
        x1,
        kappa: Some(kappa),
        w,
        base: Some(base),
        source: Some(source),
    })
}

/// One realized training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub kappa: Vec<f64>,
    pub w: f64,
}

/// Value-level pair draw with frozen parameters.
pub fn draw_pairs<R: Rng + ?Sized>(
    regime: CouplingRegime,
    predictor: Option<&SourcePredictor>,
    params: &ParamStore,
    batch: &Batch,
    rng: &mut R,
) -> Result<Vec<Pair>> {
    let mut tape = Tape::new();
    let draw = draw_pairs_on_tape(&mut tape, regime, predictor, params, batch, None, rng)?;
    let x0 = tape.value(draw.x0);
    let kappa = draw.kappa.map(|k| tape.value(k).clone());
    Ok((0..batch.len())
        .map(|i| Pair {
            x0: x0.row(i).to_vec(),
            x1: batch.x1.row(i).to_vec(),
            kappa: kappa.as_ref().map(|k| k.row(i).to_vec()).unwrap_or_default(),
            w: draw.w[i],
        })
        .collect())
}

/// Unconditional standard-normal source of the same shape; the reference
/// the independent regime must reproduce.
pub fn standard_source<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> Matrix {
    let data = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec(n, d, data).expect("sized")
}
