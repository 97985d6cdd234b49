//! Fully-connected networks with an optional sinusoidal time input.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::matrix::{self, Matrix};
use super::params::{ParamSource, ParamStore};
use super::tape::{Activation, Tape, Var};
use crate::error::{Error, Result};

/// Largest frequency of the sinusoidal time embedding; the smallest is 1.
pub const MAX_TIME_FREQUENCY: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    /// Width of the time embedding concatenated to the input; 0 means the
    /// network takes no time argument. Must be even.
    pub time_embed_dim: usize,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::config("network input and output dims must be positive"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::config("time_embed_dim must be even"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every layer in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim + self.time_embed_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    /// Closed-form scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }
}

/// Sinusoidal embedding of a batch of times: `[cos(f_k t) | sin(f_k t)]` with
/// `width / 2` frequencies spaced geometrically from 1 to [`MAX_TIME_FREQUENCY`].
pub fn time_embedding(ts: &[f64], width: usize) -> Matrix {
    let half = width / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| {
            if half == 1 {
                1.0
            } else {
                MAX_TIME_FREQUENCY.powf(k as f64 / (half - 1) as f64)
            }
        })
        .collect();
    let mut out = Matrix::zeros(ts.len(), width);
    for (i, &t) in ts.iter().enumerate() {
        let row = out.row_mut(i);
        for (k, f) in freqs.iter().enumerate() {
            let (s, c) = (f * t).sin_cos();
            row[k] = c;
            row[half + k] = s;
        }
    }
    out
}

/// A network bound to a parameter-name prefix inside a shared [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub prefix: String,
}

impl Mlp {
    pub fn new(spec: MlpSpec, prefix: impl Into<String>) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            prefix: prefix.into(),
        })
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.weight", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.bias", self.prefix)
    }

    /// Register Kaiming-uniform weights (fan-in) and zero biases.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for (l, (fan_in, fan_out)) in self.spec.layer_dims().into_iter().enumerate() {
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
            store.insert(self.weight_name(l), Matrix::from_vec(fan_out, fan_in, w)?)?;
            store.insert(self.bias_name(l), Matrix::zeros(1, fan_out))?;
        }
        Ok(())
    }

    /// Zero the weights and bias of the output layer.
    pub fn zero_output_layer(&self, store: &mut ParamStore) -> Result<()> {
        let last = self.spec.num_layers() - 1;
        for name in [self.weight_name(last), self.bias_name(last)] {
            let shape = store.require(&name)?.shape();
            store.set_value(&name, Matrix::zeros(shape.0, shape.1))?;
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix, t: Option<&[f64]>) -> Result<()> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::shape(format!(
                "`{}` expects inputs of width {}, got {}",
                self.prefix,
                self.spec.input_dim,
                x.cols()
            )));
        }
        match (t, self.spec.time_embed_dim > 0) {
            (Some(ts), true) if ts.len() == x.rows() => Ok(()),
            (Some(ts), true) => Err(Error::shape(format!(
                "{} times for {} inputs",
                ts.len(),
                x.rows()
            ))),
            (None, false) => Ok(()),
            (Some(_), false) => Err(Error::config(format!(
                "`{}` has no time input but a time was supplied",
                self.prefix
            ))),
            (None, true) => Err(Error::config(format!(
                "`{}` needs a time input",
                self.prefix
            ))),
        }
    }

    /// Batched evaluation without recording a tape.
    pub fn forward(&self, params: &(impl ParamSource + ?Sized), x: &Matrix, t: Option<&[f64]>) -> Result<Matrix> {
        self.check_input(x, t)?;
        let mut h = match t {
            Some(ts) => x.hcat(&time_embedding(ts, self.spec.time_embed_dim)),
            None => x.clone(),
        };
        let last = self.spec.num_layers() - 1;
        for l in 0..=last {
            let w = params.require(&self.weight_name(l))?;
            let b = params.require(&self.bias_name(l))?;
            if w.cols() != h.cols() || b.shape() != (1, w.rows()) {
                return Err(Error::shape(format!(
                    "layer {l} of `{}`: weight {:?}, bias {:?}, input width {}",
                    self.prefix,
                    w.shape(),
                    b.shape(),
                    h.cols()
                )));
            }
            h = matrix::affine(&h, w, b);
            if l < last {
                let act = self.spec.activation;
                h.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
            }
        }
        Ok(h)
    }

    /// Single-point convenience wrapper around [`Mlp::forward`].
    pub fn forward_one(&self, params: &(impl ParamSource + ?Sized), x: &[f64], t: Option<f64>) -> Result<Vec<f64>> {
        let ts = t.map(|t| [t]);
        let out = self.forward(params, &Matrix::row_vector(x), ts.as_ref().map(|a| &a[..]))?;
        Ok(out.into_vec())
    }

    /// Record the forward pass on `tape` with trainable parameters.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        x: Var,
        t: Option<&[f64]>,
    ) -> Result<Var> {
        self.check_input(tape.value(x), t)?;
        let mut h = match t {
            Some(ts) => {
                let emb = tape.constant(time_embedding(ts, self.spec.time_embed_dim));
                tape.hcat(x, emb)?
            }
            None => x,
        };
        let last = self.spec.num_layers() - 1;
        for l in 0..=last {
            let w = tape.param(params, &self.weight_name(l))?;
            let b = tape.param(params, &self.bias_name(l))?;
            h = tape.affine(h, w, b)?;
            if l < last {
                h = tape.activation(h, self.spec.activation);
            }
        }
        Ok(h)
    }
}
