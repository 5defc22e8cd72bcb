//! JSON experiment configurations and dataset sources.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{DatasetMetadata, TransitionDataset};
use crate::envs::{
    generate_random_agent, generate_uniform_grid, scripted_demonstrator, AnyEnv, BehaviorPolicy, DemonstratorParams,
    EnvName, Environment, MountainCar, StartSampler,
};
use crate::error::{NopgError, Result};
use crate::optimizer::{EvalProtocol, TrainConfig};

/// Where the training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// A dataset CSV written by `generate`.
    File { path: PathBuf },
    /// Uniform grid over internal states and actions, one count per dimension.
    Grid { counts: Vec<usize> },
    /// Trajectories of a behavior policy.
    RandomAgent {
        trajectories: usize,
        max_steps: usize,
        behavior: BehaviorPolicy,
        #[serde(default = "default_start")]
        start: StartSampler,
        /// Keep only the first this many rows.
        #[serde(default)]
        max_rows: Option<usize>,
    },
    /// Scripted mountain-car demonstrations.
    Demonstrations {
        count: usize,
        #[serde(default)]
        params: DemonstratorParams,
    },
}

fn default_start() -> StartSampler {
    StartSampler::Environment
}

impl DatasetSource {
    /// Loads or generates the dataset. Relative file paths resolve against `base`.
    pub fn materialize(&self, env: &AnyEnv, seed: u64, base: Option<&Path>) -> Result<TransitionDataset> {
        match self {
            DatasetSource::File { path } => {
                let path = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path.clone(),
                };
                if !path.exists() {
                    return Err(NopgError::InvalidInput(format!(
                        "dataset file {} does not exist",
                        path.display()
                    )));
                }
                TransitionDataset::load_csv(&path)
            }
            DatasetSource::Grid { counts } => generate_uniform_grid(env, counts),
            DatasetSource::RandomAgent {
                trajectories,
                max_steps,
                behavior,
                start,
                max_rows,
            } => {
                let ds = generate_random_agent(env, *trajectories, *max_steps, behavior, start, seed)?;
                Ok(match max_rows {
                    Some(n) => ds.truncated(*n),
                    None => ds,
                })
            }
            DatasetSource::Demonstrations { count, params } => {
                if env.name() != EnvName::Mountaincar {
                    return Err(NopgError::InvalidInput(
                        "scripted demonstrations exist only for the mountain car".into(),
                    ));
                }
                scripted_demonstrator(&MountainCar::new(), *count, params, seed)
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            DatasetSource::File { path } => format!("file {}", path.display()),
            DatasetSource::Grid { counts } => format!("uniform grid {counts:?}"),
            DatasetSource::RandomAgent {
                trajectories,
                max_steps,
                ..
            } => format!("random agent, {trajectories} trajectories of at most {max_steps} steps"),
            DatasetSource::Demonstrations { count, .. } => format!("{count} scripted demonstrations"),
        }
    }

    pub fn metadata(&self, env: &AnyEnv, dataset: &TransitionDataset, seed: u64) -> Result<DatasetMetadata> {
        let spec = env.spec();
        Ok(DatasetMetadata {
            environment: env.name().to_string(),
            state_dim: dataset.state_dim(),
            action_dim: dataset.action_dim(),
            action_low: spec.action_low.clone(),
            action_high: spec.action_high.clone(),
            seed,
            rows: dataset.len(),
            generator: serde_json::to_value(self)?,
            config_hash: None,
        })
    }
}

/// One experiment: environment, data, training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub env: EnvName,
    pub dataset: DatasetSource,
    pub train: TrainConfig,
    pub eval: EvalProtocol,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Write a policy checkpoint every this many iterations; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let env = self.env.build();
        let spec = env.spec();
        if let crate::optimizer::BandwidthSpec::Factors { state, action } = &self.train.bandwidths {
            if state.len() != spec.state_dim || action.len() != spec.action_dim {
                return Err(NopgError::InvalidInput(format!(
                    "bandwidth factors must have {} state and {} action entries",
                    spec.state_dim, spec.action_dim
                )));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(config_hash(&serde_json::to_string(self)?))
    }
}

pub fn config_hash(canonical: &str) -> String {
    Sha256::digest(canonical.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Header comment for output files.
pub fn provenance_comment(config_hash: &str, seed: u64, extra: &str) -> String {
    let mut s = format!("config_sha256 {config_hash}\nseed {seed}");
    if !extra.is_empty() {
        s.push('\n');
        s.push_str(extra);
    }
    s
}
