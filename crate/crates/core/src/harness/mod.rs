//! Seeded experiment drivers. Each experiment is a pure function of its
//! [`ExperimentSpec`]; independent cells run through [`crate::par::map`].

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emit::{EmitError, Summary};
use crate::fit::FitError;
use crate::graph::{
    build_asym_diamond, build_chain, build_diamond, build_grid, build_v2, load_dag, Env, GraphError, GridReward,
};
use crate::oracle::OracleError;
use crate::trainer::TrainError;

mod audit;
mod complexity;
mod convergence;
mod noise;
mod order;
mod regularization;

pub use audit::run_audit;
pub use complexity::{custom_probs_with_discrepancy, run_noise_sample_ratio, run_sample_complexity};
pub use convergence::run_convergence;
pub use noise::{run_noise_drift, run_noise_objective};
pub use order::{alpha_weights, run_error_accum, run_order};
pub use regularization::{db_kl_gap, run_regularization, DbKlPoint};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Emit(#[from] EmitError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    Convergence,
    SampleComplexity,
    Order,
    ErrorAccum,
    NoiseObjective,
    NoiseDrift,
    NoiseSampleRatio,
    Regularization,
    Audit,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 9] = [
        Self::Convergence,
        Self::SampleComplexity,
        Self::Order,
        Self::ErrorAccum,
        Self::NoiseObjective,
        Self::NoiseDrift,
        Self::NoiseSampleRatio,
        Self::Regularization,
        Self::Audit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Convergence => "convergence",
            Self::SampleComplexity => "sample_complexity",
            Self::Order => "order",
            Self::ErrorAccum => "error_accum",
            Self::NoiseObjective => "noise_objective",
            Self::NoiseDrift => "noise_drift",
            Self::NoiseSampleRatio => "noise_sample_ratio",
            Self::Regularization => "regularization",
            Self::Audit => "audit",
        }
    }
}

impl std::str::FromStr for ExperimentId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown experiment '{s}'"))
    }
}

impl std::fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EnvSpec {
    Chain { length: usize, reward: f64 },
    Grid { dim: usize, side: usize, landscape: GridReward },
    V2 { r1: f64, r2: f64 },
    Diamond { reward: f64 },
    AsymDiamond { r_t: f64, r_t2: f64 },
    File { path: PathBuf },
}

impl EnvSpec {
    pub fn build(&self) -> Result<Env, GraphError> {
        match self {
            Self::Chain { length, reward } => build_chain(*length, *reward),
            Self::Grid { dim, side, landscape } => build_grid(*dim, *side, *landscape),
            Self::V2 { r1, r2 } => build_v2(*r1, *r2),
            Self::Diamond { reward } => build_diamond(*reward),
            Self::AsymDiamond { r_t, r_t2 } => build_asym_diamond(*r_t, *r_t2),
            Self::File { path } => load_dag(path),
        }
    }

    /// Short identifier used in file names.
    pub fn key(&self) -> String {
        match self {
            Self::Chain { length, .. } => format!("chain{length}"),
            Self::Grid { dim, side, .. } => format!("grid{dim}x{side}"),
            Self::V2 { .. } => "v2".into(),
            Self::Diamond { .. } => "diamond".into(),
            Self::AsymDiamond { .. } => "asymdiamond".into(),
            Self::File { path } => path
                .file_stem()
                .map(|s| s.to_string_lossy().replace(|c: char| !c.is_ascii_alphanumeric(), ""))
                .unwrap_or_else(|| "file".into()),
        }
    }

    /// Environments whose symmetry pins down the FM dynamics from a zero init.
    pub fn is_symmetric(&self) -> bool {
        matches!(self, Self::Chain { .. } | Self::V2 { .. } | Self::Diamond { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub experiment: ExperimentId,
    /// `None` selects the experiment's default environment.
    pub env: Option<EnvSpec>,
    /// Swept and fixed parameters, `key -> values`.
    pub grid: BTreeMap<String, Vec<String>>,
    pub seeds: usize,
    pub sigma2: Vec<f64>,
    pub eps: Vec<f64>,
    pub base_seed: u64,
}

impl ExperimentSpec {
    pub fn new(experiment: ExperimentId) -> Self {
        Self {
            experiment,
            env: None,
            grid: BTreeMap::new(),
            seeds: 0,
            sigma2: Vec::new(),
            eps: Vec::new(),
            base_seed: 0,
        }
    }

    pub fn with_env(mut self, env: EnvSpec) -> Self {
        self.env = Some(env);
        self
    }

    pub fn with_seeds(mut self, seeds: usize) -> Self {
        self.seeds = seeds;
        self
    }

    pub fn with_grid(mut self, key: &str, values: &[&str]) -> Self {
        self.grid.insert(key.into(), values.iter().map(|v| v.to_string()).collect());
        self
    }

    pub fn with_sigma2(mut self, v: &[f64]) -> Self {
        self.sigma2 = v.to_vec();
        self
    }

    pub fn with_eps(mut self, v: &[f64]) -> Self {
        self.eps = v.to_vec();
        self
    }

    pub fn with_base_seed(mut self, seed: u64) -> Self {
        self.base_seed = seed;
        self
    }

    pub(crate) fn env_or(&self, default: EnvSpec) -> EnvSpec {
        self.env.clone().unwrap_or(default)
    }

    pub(crate) fn seeds_or(&self, default: usize) -> usize {
        if self.seeds == 0 {
            default
        } else {
            self.seeds
        }
    }

    pub(crate) fn list<T: std::str::FromStr>(&self, key: &str, default: &[T]) -> Result<Vec<T>, HarnessError>
    where
        T: Clone,
        T::Err: std::fmt::Display,
    {
        match self.grid.get(key) {
            None => Ok(default.to_vec()),
            Some(vals) if vals.is_empty() => Err(HarnessError::InvalidSpec(format!("empty grid for '{key}'"))),
            Some(vals) => vals
                .iter()
                .map(|v| {
                    v.parse::<T>()
                        .map_err(|e| HarnessError::InvalidSpec(format!("bad value '{v}' for '{key}': {e}")))
                })
                .collect(),
        }
    }

    pub(crate) fn one<T: std::str::FromStr + Clone>(&self, key: &str, default: T) -> Result<T, HarnessError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.list(key, std::slice::from_ref(&default))?;
        if v.len() != 1 {
            return Err(HarnessError::InvalidSpec(format!("'{key}' takes a single value")));
        }
        Ok(v.into_iter().next().unwrap())
    }

    pub(crate) fn sigma2_or(&self, default: &[f64]) -> Vec<f64> {
        if self.sigma2.is_empty() {
            default.to_vec()
        } else {
            self.sigma2.clone()
        }
    }

    pub(crate) fn eps_or(&self, default: &[f64]) -> Vec<f64> {
        if self.eps.is_empty() {
            default.to_vec()
        } else {
            self.eps.clone()
        }
    }
}

/// Run the experiment named in `spec`.
pub fn run(spec: &ExperimentSpec) -> Result<Summary, HarnessError> {
    match spec.experiment {
        ExperimentId::Convergence => run_convergence(spec),
        ExperimentId::SampleComplexity => run_sample_complexity(spec),
        ExperimentId::Order => run_order(spec),
        ExperimentId::ErrorAccum => run_error_accum(spec),
        ExperimentId::NoiseObjective => run_noise_objective(spec),
        ExperimentId::NoiseDrift => run_noise_drift(spec),
        ExperimentId::NoiseSampleRatio => run_noise_sample_ratio(spec),
        ExperimentId::Regularization => run_regularization(spec),
        ExperimentId::Audit => run_audit(spec),
    }
}

pub(crate) fn fmt_key(v: f64) -> String {
    format!("{v}").replace('.', "p").replace('-', "m")
}

/// The spec's environment, expanded over `side` for grids and `length` for
/// chains when those keys are present.
pub(crate) fn env_sweep(spec: &ExperimentSpec, default: EnvSpec) -> Result<Vec<EnvSpec>, HarnessError> {
    Ok(match spec.env_or(default) {
        EnvSpec::Grid { dim, side, landscape } => {
            spec.list("side", &[side])?.into_iter().map(|side| EnvSpec::Grid { dim, side, landscape }).collect()
        }
        EnvSpec::Chain { length, reward } => {
            spec.list("length", &[length])?.into_iter().map(|length| EnvSpec::Chain { length, reward }).collect()
        }
        other => vec![other],
    })
}

pub(crate) fn noise_kind(spec: &ExperimentSpec) -> Result<crate::trainer::NoiseKind, HarnessError> {
    let kind: String = spec.one("noise", "uniform".to_string())?;
    match kind.as_str() {
        "uniform" => Ok(crate::trainer::NoiseKind::UniformZeroMean),
        "gaussian" => Ok(crate::trainer::NoiseKind::GaussianZeroMean),
        other => Err(HarnessError::InvalidSpec(format!("unknown noise kind '{other}'"))),
    }
}
