//! Small-network machinery: matrices, reverse-mode autodiff, MLPs, Adam and EMA.

mod checkpoint;
mod matrix;
mod mlp;
mod optim;
mod params;
mod tape;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use matrix::Matrix;
pub use mlp::{time_embedding, Mlp, MlpSpec, MAX_TIME_FREQUENCY};
pub use optim::{lr_schedule, Adam, EmaState};
pub use params::{Param, ParamSource, ParamStore};
pub use tape::{Activation, Tape, Var};

pub(crate) use tape::mixed_log_var;
