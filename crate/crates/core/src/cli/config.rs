use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coupling::KappaMode;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::TrainConfig;
use crate::solvers::SolverSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Curvature,
    Doi,
    W2,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Curvature => "curvature",
            Metric::Doi => "doi",
            Metric::W2 => "w2",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum KappaFrom {
    #[default]
    None,
    Dataset,
    File,
}

/// One requested evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    pub metric: Metric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default)]
    pub w: f64,
    #[serde(default)]
    pub kappa_from: KappaFrom,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Time points per pair for the degree of intersection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_grid: Option<usize>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl EvalSpec {
    pub fn new(metric: Metric) -> Self {
        Self {
            metric,
            solver: None,
            n: None,
            w: 0.0,
            kappa_from: KappaFrom::None,
            seeds: default_seeds(),
            t_grid: None,
        }
    }
}

/// Sweep axes; an empty axis keeps the base config's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub beta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kappa: Vec<KappaMode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub w: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nfe: Vec<usize>,
    /// Solver kinds: `euler`, `heun2`, `rk45`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub solver: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seed: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checkpoint_iteration: Vec<usize>,
}

impl SweepAxes {
    pub fn is_empty(&self) -> bool {
        *self == SweepAxes::default()
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Declarative description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: Dataset,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub eval: Vec<EvalSpec>,
    #[serde(default, skip_serializing_if = "SweepAxes::is_empty")]
    pub sweep: SweepAxes,
}

/// The part of a config that determines a trained model.
#[derive(Serialize)]
struct RunIdentity<'a> {
    dataset: &'a Dataset,
    train: &'a TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate(&self.dataset)?;
        for e in &self.eval {
            if let Some(s) = e.solver {
                s.validate()?;
            }
            if !(0.0..=1.0).contains(&e.w) {
                return Err(Error::config(format!("eval.w must be in [0, 1], got {}", e.w)));
            }
            if e.seeds.is_empty() {
                return Err(Error::config("eval.seeds must not be empty"));
            }
            if e.kappa_from == KappaFrom::File {
                return Err(Error::config("eval.kappa_from = \"file\" is only available on the command line"));
            }
        }
        if let Some(w) = self.sweep.w.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::config(format!("sweep.w values must be in [0, 1], got {w}")));
        }
        if let Some(s) = self.sweep.solver.iter().find(|s| !matches!(s.as_str(), "euler" | "heun2" | "rk45")) {
            return Err(Error::config(format!("sweep.solver: unknown solver `{s}`")));
        }
        Ok(())
    }

    /// Hex prefix of the SHA-256 of the canonical JSON form of
    /// `{dataset, train}`; names the run directory.
    pub fn run_hash(&self) -> String {
        config_hash(&self.dataset, &self.train)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.run_hash())
    }
}

/// Canonical hash of a training setup. JSON object keys are sorted, floats
/// use the shortest round-trip representation.
pub fn config_hash(dataset: &Dataset, train: &TrainConfig) -> String {
    let value = serde_json::to_value(RunIdentity { dataset, train }).expect("plain data");
    let canonical = serde_json::to_string(&value).expect("plain data");
    let digest = Sha256::digest(canonical.as_bytes());
    hex::encode(digest)[..16].to_owned()
}
