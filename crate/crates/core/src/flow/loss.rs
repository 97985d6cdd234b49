use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{FlowModel, VelocityField};
use crate::coupling::{draw_pairs_on_tape, CouplingRegime};
use crate::data::Batch;
use crate::distributions::{interpolate_on_tape, interpolate_state};
use crate::error::{Error, Result};
use crate::nn::{Matrix, ParamStore, Tape, Var};
use crate::solvers::VectorField;

/// Which Gaussian the KL regularizer is applied to.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KlTarget {
    /// `N(mu(kappa), Sigma(kappa))` before mixing, as in the training
    /// algorithm's pseudo-code.
    #[default]
    UnmixedBase,
    /// The mixed source `N(w mu, w Sigma + (1 - w) I)` the pair was drawn from.
    MixedDistribution,
}

/// `|x1 - x0 - v(x_t, t)|^2` at a single time, `x_t = t x1 + (1 - t) x0`.
pub fn per_example_loss(
    field: &(impl VectorField + ?Sized),
    x0: &[f64],
    x1: &[f64],
    t: f64,
) -> Result<f64> {
    let xt = interpolate_state(x0, x1, t)?;
    let v = field.eval(&Matrix::row_vector(&xt), t)?;
    if v.cols() != x0.len() {
        return Err(Error::shape(format!("field returned {} coordinates for {}", v.cols(), x0.len())));
    }
    if !v.all_finite() {
        return Err(Error::divergence("non-finite velocity"));
    }
    Ok(x0
        .iter()
        .zip(x1)
        .zip(v.as_slice())
        .map(|((a, b), v)| (b - a - v).powi(2))
        .sum())
}

/// Per-row squared residual `|x1 - x0 - v(x_t, t)|^2` as an `n x 1` node.
pub fn rf_residual_on_tape(
    tape: &mut Tape,
    velocity: &VelocityField,
    params: &ParamStore,
    x0: Var,
    x1: Var,
    t: &[f64],
) -> Result<Var> {
    let xt = interpolate_on_tape(tape, x0, x1, t)?;
    let v = velocity.mlp.forward_tape(tape, params, xt, Some(t))?;
    let chord = tape.sub(x1, x0)?;
    let r = tape.sub(chord, v)?;
    let sq = tape.mul(r, r)?;
    Ok(tape.sum_rows(sq))
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub recon: Var,
    pub kl: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Record the regime's training loss for one batch:
/// `mean(recon) + beta * mean(kl)`; the independent regime has no KL term.
///
/// Draw order: pair draw (see [`draw_pairs_on_tape`]), then one `t ~ U(0, 1)`
/// per example.
pub fn batch_loss_on_tape<R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &FlowModel,
    batch: &Batch,
    beta: f64,
    kl_target: KlTarget,
    rng: &mut R,
) -> Result<(LossTerms, LossValues)> {
    let draw = draw_pairs_on_tape(
        tape,
        model.regime,
        model.source.as_ref(),
        &model.params,
        batch,
        None,
        rng,
    )?;
    let t: Vec<f64> = (0..batch.len()).map(|_| rng.random::<f64>()).collect();
    let rows = rf_residual_on_tape(tape, &model.velocity, &model.params, draw.x0, draw.x1, &t)?;
    let recon = tape.mean(rows);

    let (total, kl) = match (draw.base, draw.source) {
        (Some(base), Some(source)) => {
            let target = match kl_target {
                KlTarget::UnmixedBase => base,
                KlTarget::MixedDistribution => source,
            };
            let kl_rows = target.kl_to_standard(tape)?;
            let kl = tape.mean(kl_rows);
            let weighted = tape.scale(kl, beta);
            (tape.add(recon, weighted)?, Some(kl))
        }
        _ => (recon, None),
    };
    let values = LossValues {
        total: tape.scalar(total),
        recon: tape.scalar(recon),
        kl: kl.map(|k| tape.scalar(k)).unwrap_or(0.0),
    };
    if !values.total.is_finite() || !values.recon.is_finite() || !values.kl.is_finite() {
        return Err(Error::divergence(format!(
            "non-finite loss (recon {}, kl {})",
            values.recon, values.kl
        )));
    }
    Ok((LossTerms { total, recon, kl }, values))
}

/// Value of the MixFlow objective on one batch with the model's current
/// weights. Returns `(total, recon, kl)` as [`LossValues`].
pub fn mixflow_loss<R: Rng + ?Sized>(
    model: &FlowModel,
    batch: &Batch,
    beta: f64,
    kl_target: KlTarget,
    rng: &mut R,
) -> Result<LossValues> {
    if model.regime != CouplingRegime::MixFlow {
        return Err(Error::config(format!(
            "mixflow_loss needs a MixFlow model, got {:?}",
            model.regime
        )));
    }
    let mut tape = Tape::new();
    batch_loss_on_tape(&mut tape, model, batch, beta, kl_target, rng).map(|(_, v)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::KappaMode;
    use crate::data::Dataset;
    use crate::flow::ModelConfig;
    use crate::nn::Activation;
    use crate::solvers::FnField;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            hidden_dims: vec![16, 16],
            time_embed_dim: 4,
            source_hidden_dims: vec![16],
            activation: Activation::SiLU,
        }
    }

    #[test]
    fn exact_velocity_gives_zero_loss() {
        let (x0, x1) = ([0.5, -1.0], [2.0, 3.0]);
        let field = FnField::new(2, move |x: &Matrix, _t| {
            Matrix::filled(x.rows(), 1, 1.5).hcat(&Matrix::filled(x.rows(), 1, 4.0))
        });
        assert_eq!(per_example_loss(&field, &x0, &x1, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn zero_field_gives_squared_chord() {
        let field = FnField::new(2, |x: &Matrix, _t| Matrix::zeros(x.rows(), 2));
        assert_eq!(per_example_loss(&field, &[0.0, 0.0], &[3.0, 4.0], 0.6).unwrap(), 25.0);
        assert!(matches!(
            per_example_loss(&field, &[0.0, 0.0], &[3.0, 4.0], 1.5),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn nan_field_is_divergence() {
        let field = FnField::new(1, |x: &Matrix, _t| Matrix::filled(x.rows(), 1, f64::NAN));
        assert!(matches!(
            per_example_loss(&field, &[0.0], &[1.0], 0.5),
            Err(Error::Divergence { .. })
        ));
    }

    fn model(kappa: KappaMode) -> FlowModel {
        FlowModel::new(2, CouplingRegime::MixFlow, kappa, &small(), 0.99, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn beta_zero_total_is_recon() {
        let m = model(KappaMode::DataSample);
        let batch = Dataset::eight_gaussians().draw_batch(32, &mut ChaCha8Rng::seed_from_u64(0));
        let v = mixflow_loss(&m, &batch, 0.0, KlTarget::UnmixedBase, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(v.total, v.recon);
    }

    #[test]
    fn kl_is_zero_at_init_for_every_kappa() {
        for kappa in [
            KappaMode::DataSample,
            KappaMode::ClassLabel { num_classes: 8, embed_dim: 4 },
            KappaMode::IndependentNoise { dim: 3 },
        ] {
            let m = model(kappa);
            let batch = Dataset::eight_gaussians().draw_batch(16, &mut ChaCha8Rng::seed_from_u64(0));
            let v = mixflow_loss(&m, &batch, 1.0, KlTarget::UnmixedBase, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert_eq!(v.kl, 0.0, "{kappa:?}");
        }
    }

    #[test]
    fn total_minus_recon_is_beta_kl() {
        let mut m = model(KappaMode::DataSample);
        // move the predictor off N(0, I) so the KL is non-trivial
        for (name, p) in m.params.iter_mut() {
            if name.starts_with("phi.") {
                p.value.as_mut_slice().iter_mut().enumerate().for_each(|(i, v)| *v += 0.01 * (i % 7) as f64);
            }
        }
        let batch = Dataset::eight_gaussians().draw_batch(64, &mut ChaCha8Rng::seed_from_u64(4));
        let beta = 1e-5;
        let v = mixflow_loss(&m, &batch, beta, KlTarget::UnmixedBase, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(v.kl > 0.0);
        assert!(((v.total - v.recon) - beta * v.kl).abs() < 1e-12);
    }

    #[test]
    fn mixflow_loss_rejects_other_regimes() {
        let m = FlowModel::new(2, CouplingRegime::Independent, KappaMode::DataSample, &small(), 0.9, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let batch = Dataset::eight_gaussians().draw_batch(4, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(
            mixflow_loss(&m, &batch, 0.0, KlTarget::UnmixedBase, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Config(_))
        ));
    }
}
