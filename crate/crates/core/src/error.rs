use thiserror::Error;

use crate::solvers::Trajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Missing parameters, inconsistent dimensions between configured pieces,
    /// invalid hyper-parameters.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// Misuse of an API object, e.g. running backward twice on one tape.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("input error: {0}")]
    Input(String),

    /// A loss, gradient or network output became non-finite.
    #[error("training diverged: {what}{}", iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    Divergence {
        what: String,
        iteration: Option<usize>,
    },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Adaptive solver ran out of function evaluations. Carries what was
    /// integrated so far.
    #[error("NFE budget of {max_nfe} exceeded at t = {}", partial.times.last().copied().unwrap_or(0.0))]
    BudgetExceeded {
        max_nfe: usize,
        partial: Box<Trajectory>,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn divergence(what: impl Into<String>) -> Self {
        Error::Divergence {
            what: what.into(),
            iteration: None,
        }
    }

    /// Attach an iteration index to a divergence error; other variants pass through.
    pub fn at_iteration(self, iter: usize) -> Self {
        match self {
            Error::Divergence { what, .. } => Error::Divergence {
                what,
                iteration: Some(iter),
            },
            other => other,
        }
    }

    /// Process exit code used by the command line front-end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } => 3,
            Error::BudgetExceeded { .. } => 4,
            Error::Io(_) | Error::Evaluation(_) => 1,
            _ => 2,
        }
    }
}
