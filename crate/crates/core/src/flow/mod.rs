//! The velocity field, the three training objectives (plain rectified flow,
//! kappa-conditioned coupling with a KL regularizer, and MixFlow) and the
//! training loop.

mod loss;
mod model;
mod train;

pub use loss::{batch_loss_on_tape, mixflow_loss, per_example_loss, rf_residual_on_tape, KlTarget, LossTerms, LossValues};
pub use model::{FlowModel, ModelConfig, ModelField, VelocityField, VELOCITY_PREFIX};
pub use train::{
    seeded_rngs, train, train_with, write_history_csv, HistoryRow, TrainConfig, TrainFailure, TrainOutput, Trainer,
    TRAIN_STREAM,
};
