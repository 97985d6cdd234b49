//! Rectified-flow training with learnable forward couplings.
//!
//! The crate trains a velocity field `v(x, t)` that transports a source
//! distribution onto a target by integrating `dx/dt = v(x, t)` from `t = 0`
//! to `t = 1`. Besides the plain independent coupling `x0 ~ N(0, I)`, the
//! source can be predicted from a conditioning signal `kappa`
//! ([`coupling::CouplingRegime::KappaFC`]) or drawn from the mixture
//! `N(w mu, w Sigma + (1 - w) I)` with `w ~ U(0, 1)`
//! ([`coupling::CouplingRegime::MixFlow`]).
//!
//! Module map:
//! - [`nn`]: matrices, reverse-mode autodiff, MLPs, Adam, EMA, checkpoints.
//! - [`distributions`]: diagonal Gaussians and the mixture interpolant.
//! - [`coupling`]: the source predictor and pair drawing.
//! - [`flow`]: losses and the training loop.
//! - [`solvers`]: Euler, Heun and adaptive Dormand-Prince integration; sampling.
//! - [`metrics`]: curvature, degree of intersection, 2-Wasserstein.
//! - [`data`]: synthetic 2-D targets.
//! - [`cli`]: config files, run directories, the four subcommands.

pub mod cli;
pub mod coupling;
pub mod data;
pub mod distributions;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod nn;
pub mod solvers;

pub use error::{Error, Result};
