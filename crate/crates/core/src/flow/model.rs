use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coupling::{CouplingRegime, KappaMode, SourcePredictor};
use crate::distributions::DiagGaussian;
use crate::error::{Error, Result};
use crate::nn::{Activation, Checkpoint, EmaState, Matrix, Mlp, MlpSpec, ParamSource, ParamStore, CHECKPOINT_VERSION};
use crate::solvers::VectorField;

pub const VELOCITY_PREFIX: &str = "theta";

/// Network shapes for the velocity field and the source predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_time_embed")]
    pub time_embed_dim: usize,
    #[serde(default = "default_source_hidden")]
    pub source_hidden_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

fn default_hidden() -> Vec<usize> {
    vec![256, 256, 256]
}
fn default_time_embed() -> usize {
    64
}
fn default_source_hidden() -> Vec<usize> {
    vec![128, 128]
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dims: default_hidden(),
            time_embed_dim: default_time_embed(),
            source_hidden_dims: default_source_hidden(),
            activation: Activation::default(),
        }
    }
}

/// `v_theta(x, t)`: an MLP over `[x | embed(t)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityField {
    pub mlp: Mlp,
}

impl VelocityField {
    pub fn new(data_dim: usize, config: &ModelConfig) -> Result<Self> {
        if config.time_embed_dim == 0 {
            return Err(Error::config("the velocity field needs time_embed_dim > 0"));
        }
        let spec = MlpSpec {
            input_dim: data_dim,
            hidden_dims: config.hidden_dims.clone(),
            output_dim: data_dim,
            activation: config.activation,
            time_embed_dim: config.time_embed_dim,
        };
        Ok(Self {
            mlp: Mlp::new(spec, VELOCITY_PREFIX)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.mlp.spec.input_dim
    }

    /// Velocities for every row of `x`, row `i` at time `ts[i]`.
    pub fn eval_rows(&self, params: &(impl ParamSource + ?Sized), x: &Matrix, ts: &[f64]) -> Result<Matrix> {
        self.mlp.forward(params, x, Some(ts))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    data_dim: usize,
    regime: CouplingRegime,
    kappa: Option<KappaMode>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Everything needed to evaluate or keep training one model: the velocity
/// field, the optional source predictor, their shared parameters and EMA.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub data_dim: usize,
    pub regime: CouplingRegime,
    pub velocity: VelocityField,
    pub source: Option<SourcePredictor>,
    pub params: ParamStore,
    pub ema: EmaState,
}

impl FlowModel {
    /// Fresh model. The velocity field is initialized first, then the source
    /// predictor, both from `rng`.
    pub fn new<R: Rng + ?Sized>(
        data_dim: usize,
        regime: CouplingRegime,
        kappa: KappaMode,
        config: &ModelConfig,
        ema_decay: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let velocity = VelocityField::new(data_dim, config)?;
        let mut params = ParamStore::new();
        velocity.mlp.init(&mut params, rng)?;
        let source = match regime {
            CouplingRegime::Independent => None,
            CouplingRegime::KappaFC | CouplingRegime::MixFlow => {
                let p = SourcePredictor::new(kappa, data_dim, config.source_hidden_dims.clone(), config.activation)?;
                p.init(&mut params, rng)?;
                Some(p)
            }
        };
        let ema = EmaState::new(ema_decay, &params)?;
        Ok(Self {
            data_dim,
            regime,
            velocity,
            source,
            params,
            ema,
        })
    }

    pub fn kappa_mode(&self) -> Option<KappaMode> {
        self.source.as_ref().map(|s| s.mode)
    }

    /// Raw or EMA weights.
    pub fn weights(&self, use_ema: bool) -> &dyn ParamSource {
        if use_ema {
            &self.ema
        } else {
            &self.params
        }
    }

    /// The EMA weights as a standalone store (gradients zero).
    pub fn ema_store(&self) -> ParamStore {
        store_from(&self.ema.shadow).expect("EMA names are unique")
    }

    /// `v(x, t)` for a single point.
    pub fn velocity(&self, x: &[f64], t: f64, use_ema: bool) -> Result<Vec<f64>> {
        self.velocity
            .mlp
            .forward_one(self.weights(use_ema), x, Some(t))
    }

    /// `v(x_i, t)` for every row.
    pub fn velocity_batch(&self, x: &Matrix, t: f64, use_ema: bool) -> Result<Matrix> {
        let ts = vec![t; x.rows()];
        self.velocity.eval_rows(self.weights(use_ema), x, &ts)
    }

    pub fn field(&self, use_ema: bool) -> ModelField<'_> {
        ModelField {
            model: self,
            use_ema,
        }
    }

    /// `N(mu(kappa), Sigma(kappa))` for a single kappa.
    pub fn predict_source(&self, kappa: &[f64], use_ema: bool) -> Result<DiagGaussian> {
        let p = self
            .source
            .as_ref()
            .ok_or_else(|| Error::config("model was trained without a source predictor"))?;
        p.predict_source(self.weights(use_ema), kappa)
    }

    pub fn to_checkpoint(&self, optimizer_step: u64, seed: u64, extra: serde_json::Value) -> Result<Checkpoint> {
        let meta = ModelMeta {
            data_dim: self.data_dim,
            regime: self.regime,
            kappa: self.kappa_mode(),
            extra,
        };
        let mut networks = vec![self.velocity.mlp.clone()];
        if let Some(s) = &self.source {
            networks.push(s.mlp.clone());
        }
        Ok(Checkpoint {
            format_version: CHECKPOINT_VERSION,
            networks,
            params: self.params.values(),
            ema: self.ema.shadow.clone(),
            ema_decay: self.ema.decay,
            optimizer_step,
            seed,
            metadata: serde_json::to_value(meta)?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_value(ckpt.metadata.clone())
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let velocity_mlp = ckpt
            .networks
            .iter()
            .find(|m| m.prefix == VELOCITY_PREFIX)
            .ok_or_else(|| Error::Format("checkpoint has no velocity network".into()))?;
        let velocity = VelocityField {
            mlp: velocity_mlp.clone(),
        };
        let source = match (meta.regime, meta.kappa) {
            (CouplingRegime::Independent, _) => None,
            (_, None) => return Err(Error::Format("coupled model without a kappa mode".into())),
            (_, Some(mode)) => {
                let mlp = ckpt
                    .networks
                    .iter()
                    .find(|m| m.prefix == crate::coupling::SOURCE_PREFIX)
                    .ok_or_else(|| Error::Format("checkpoint has no source network".into()))?;
                Some(SourcePredictor {
                    mode,
                    data_dim: meta.data_dim,
                    mlp: mlp.clone(),
                })
            }
        };
        let params = store_from(&ckpt.params)?;
        let mut ema = EmaState::new(ckpt.ema_decay, &params)?;
        if ckpt.ema.keys().ne(ckpt.params.keys()) {
            return Err(Error::Format("EMA and raw weights name different parameters".into()));
        }
        ema.shadow = ckpt.ema.clone();
        let model = Self {
            data_dim: meta.data_dim,
            regime: meta.regime,
            velocity,
            source,
            params,
            ema,
        };
        model.check_params()?;
        Ok(model)
    }

    /// Extra metadata stored by [`FlowModel::to_checkpoint`].
    pub fn checkpoint_extra(ckpt: &Checkpoint) -> serde_json::Value {
        ckpt.metadata.get("extra").cloned().unwrap_or_default()
    }

    fn check_params(&self) -> Result<()> {
        let probe_x = Matrix::zeros(1, self.data_dim);
        self.velocity.eval_rows(&self.params, &probe_x, &[0.0])?;
        self.velocity.eval_rows(&self.ema, &probe_x, &[0.0])?;
        if let Some(s) = &self.source {
            let k = Matrix::zeros(1, s.mode.kappa_dim(self.data_dim));
            s.predict_batch(&self.params, &k)?;
        }
        Ok(())
    }
}

fn store_from(values: &std::collections::BTreeMap<String, Matrix>) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, m) in values {
        store.insert(name.clone(), m.clone())?;
    }
    Ok(store)
}

/// A [`FlowModel`] viewed as an ODE right-hand side.
#[derive(Clone, Copy)]
pub struct ModelField<'a> {
    model: &'a FlowModel,
    use_ema: bool,
}

impl VectorField for ModelField<'_> {
    fn dim(&self) -> usize {
        self.model.data_dim
    }

    fn eval(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        self.model.velocity_batch(x, t, self.use_ema)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            hidden_dims: vec![8, 8],
            time_embed_dim: 4,
            source_hidden_dims: vec![8],
            activation: Activation::SiLU,
        }
    }

    #[test]
    fn velocity_is_pure() {
        let m = FlowModel::new(2, CouplingRegime::MixFlow, KappaMode::DataSample, &small(), 0.9, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let a = m.velocity(&[0.3, -0.2], 0.4, false).unwrap();
        let b = m.velocity(&[0.3, -0.2], 0.4, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ema_with_zero_decay_tracks_raw_weights() {
        let mut m = FlowModel::new(2, CouplingRegime::Independent, KappaMode::DataSample, &small(), 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (_, p) in m.params.iter_mut() {
            p.value.as_mut_slice().iter_mut().for_each(|v| *v += 0.25);
        }
        m.ema.update(&m.params).unwrap();
        assert_eq!(m.velocity(&[1.0, 2.0], 0.7, true).unwrap(), m.velocity(&[1.0, 2.0], 0.7, false).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = FlowModel::new(2, CouplingRegime::KappaFC, KappaMode::ClassLabel { num_classes: 3, embed_dim: 4 }, &small(), 0.99, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let ck = m.to_checkpoint(7, 3, serde_json::json!({"tag": 1})).unwrap();
        let back = FlowModel::from_checkpoint(&via_bytes(&ck)).unwrap();
        assert_eq!(back, m);
        assert_eq!(FlowModel::checkpoint_extra(&ck)["tag"], 1);
    }

    fn via_bytes(ck: &Checkpoint) -> Checkpoint {
        Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()
    }

    #[test]
    fn independent_model_has_no_source() {
        let m = FlowModel::new(1, CouplingRegime::Independent, KappaMode::DataSample, &small(), 0.9, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(m.source.is_none());
        assert!(m.params.names().all(|n| n.starts_with("theta.")));
        assert!(matches!(m.predict_source(&[0.0], false), Err(Error::Config(_))));
    }
}
