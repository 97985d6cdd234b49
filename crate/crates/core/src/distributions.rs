//! Diagonal Gaussians: reparameterized sampling, the mixture interpolant
//! `N(w mu, w Sigma + (1 - w) I)`, and KL divergence to `N(0, I)`.
//!
//! Each operation exists twice: on plain values ([`DiagGaussian`]) and on
//! batched tape nodes ([`GaussianVars`]) so that samples stay differentiable
//! with respect to the predicted mean and log-variance.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{mixed_log_var, Matrix, Tape, Var};

/// Log-variances are clamped to this range before mixing and sampling.
pub const LOG_VAR_MIN: f64 = -60.0;
pub const LOG_VAR_MAX: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::shape(format!(
                "mean has {} entries, log_var has {}",
                mean.len(),
                log_var.len()
            )));
        }
        if !mean.iter().chain(&log_var).all(|v| v.is_finite()) {
            return Err(Error::Domain("Gaussian parameters must be finite".into()));
        }
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|l| l.exp()).collect()
    }

    /// `mu + sigma * eps` for a given standard-normal `eps`.
    pub fn reparameterize(&self, eps: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(eps)
            .map(|((m, l), e)| m + (0.5 * l.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).exp() * e)
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let eps = standard_normal_vec(rng, self.dim());
        self.reparameterize(&eps)
    }

    /// The interpolant between this distribution (`w = 1`) and `N(0, I)` (`w = 0`).
    pub fn mix(&self, w: f64) -> Result<DiagGaussian> {
        MixtureInterpolant::new(self.clone(), w).map(|m| m.realize())
    }

    /// `0.5 * sum(sigma^2 + mu^2 - 1 - log sigma^2)`.
    pub fn kl_to_standard(&self) -> f64 {
        0.5 * self
            .mean
            .iter()
            .zip(&self.log_var)
            .map(|(m, l)| l.exp() + m * m - 1.0 - l)
            .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureInterpolant {
    pub base: DiagGaussian,
    pub w: f64,
}

impl MixtureInterpolant {
    pub fn new(base: DiagGaussian, w: f64) -> Result<Self> {
        check_unit("mixture weight w", w)?;
        Ok(Self { base, w })
    }

    /// Mean `w mu`, variance `w sigma^2 + (1 - w)`; exact at both endpoints.
    pub fn realize(&self) -> DiagGaussian {
        let w = self.w;
        let mean = self.base.mean.iter().map(|m| w * m).collect();
        let log_var = self
            .base
            .log_var
            .iter()
            .map(|l| mixed_log_var(l.clamp(LOG_VAR_MIN, LOG_VAR_MAX), w))
            .collect();
        DiagGaussian { mean, log_var }
    }
}

fn check_unit(what: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Domain(format!("{what} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

/// `t x1 + (1 - t) x0`.
pub fn interpolate_state(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    check_unit("time t", t)?;
    if x0.len() != x1.len() {
        return Err(Error::shape(format!("{} vs {} coordinates", x0.len(), x1.len())));
    }
    Ok(x0
        .iter()
        .zip(x1)
        .map(|(a, b)| if t == 1.0 { *b } else { t * b + (1.0 - t) * a })
        .collect())
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `rows x cols` matrix of independent standard-normal draws, row-major order.
pub fn standard_normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, standard_normal_vec(rng, rows * cols)).expect("sized")
}

/// A batch of diagonal Gaussians living on a tape, one per row.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussianVars {
    /// Per-row interpolant with weights `w`.
    pub fn mix(self, tape: &mut Tape, w: &[f64]) -> Result<GaussianVars> {
        for &wi in w {
            check_unit("mixture weight w", wi)?;
        }
        let zeros = vec![0.0; w.len()];
        let mean = tape.row_affine(self.mean, w, &zeros)?;
        let clamped = tape.clamp(self.log_var, LOG_VAR_MIN, LOG_VAR_MAX);
        let log_var = tape.mix_log_var(clamped, w)?;
        Ok(GaussianVars { mean, log_var })
    }

    /// Reparameterized draw `mean + exp(log_var / 2) * eps`.
    pub fn sample(self, tape: &mut Tape, eps: Matrix) -> Result<Var> {
        let clamped = tape.clamp(self.log_var, LOG_VAR_MIN, LOG_VAR_MAX);
        let half = tape.scale(clamped, 0.5);
        let std = tape.exp(half);
        let eps = tape.constant(eps);
        let noise = tape.mul(std, eps)?;
        tape.add(self.mean, noise)
    }

    /// KL to the standard normal per row, as an `n x 1` column.
    pub fn kl_to_standard(self, tape: &mut Tape) -> Result<Var> {
        let dim = tape.value(self.mean).cols() as f64;
        let var = tape.exp(self.log_var);
        let mean_sq = tape.mul(self.mean, self.mean)?;
        let a = tape.add(var, mean_sq)?;
        let b = tape.sub(a, self.log_var)?;
        let s = tape.sum_rows(b);
        let s = tape.add_scalar(s, -dim);
        Ok(tape.scale(s, 0.5))
    }
}

/// Per-row `t x1 + (1 - t) x0` on the tape.
pub fn interpolate_on_tape(tape: &mut Tape, x0: Var, x1: Var, t: &[f64]) -> Result<Var> {
    let zeros = vec![0.0; t.len()];
    let one_minus: Vec<f64> = t.iter().map(|t| 1.0 - t).collect();
    let a = tape.row_affine(x1, t, &zeros)?;
    let b = tape.row_affine(x0, &one_minus, &zeros)?;
    tape.add(a, b)
}
