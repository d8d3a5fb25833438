//! Per-stage JSON configuration files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use neurok_core::dynamics::{BoundaryTargets, FitOptions, PotentialSpec, SimConfig};
use neurok_core::ik::IkConfig;
use neurok_core::model::{ModelConfig, TrainConfig};
use neurok_core::reduction::ReductionConfig;
use neurok_core::synthdata::{ScenarioSpec, Split};

pub const SCHEMA_VERSION: u32 = 1;

fn schema() -> u32 {
    SCHEMA_VERSION
}

/// Reads a stage config, rejecting unknown keys and other schema versions.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    match raw.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        Some(v) => bail!("{}: unsupported schema_version {v} (expected {SCHEMA_VERSION})", path.display()),
        None => bail!("{}: missing integer field `schema_version`", path.display()),
    }
    serde_json::from_value(raw).with_context(|| format!("invalid config {}", path.display()))
}

/// Resolves `p` against the directory holding the config file.
pub fn relative_to(config: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    config.parent().map(|d| d.join(p)).unwrap_or_else(|| p.to_path_buf())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    #[serde(default = "schema")]
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    pub scenarios: Vec<ScenarioSpec>,
}

fn default_train_fraction() -> f64 {
    0.8
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFileConfig {
    #[serde(default = "schema")]
    pub schema_version: u32,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Dataset splits to train on.
    #[serde(default = "default_splits")]
    pub splits: Vec<Split>,
}

fn default_splits() -> Vec<Split> {
    vec![Split::Train]
}

impl Default for TrainFileConfig {
    fn default() -> Self {
        Self { schema_version: SCHEMA_VERSION, model: ModelConfig::default(), train: TrainConfig::default(), splits: default_splits() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReduceFileConfig {
    #[serde(default = "schema")]
    pub schema_version: u32,
    #[serde(default)]
    pub reduction: ReductionConfig,
    /// Seed of the fixed surface sample set (shared with simulate and eval-ik).
    #[serde(default)]
    pub sample_seed: u64,
}

impl Default for ReduceFileConfig {
    fn default() -> Self {
        Self { schema_version: SCHEMA_VERSION, reduction: ReductionConfig::default(), sample_seed: 0 }
    }
}

/// Which map the simulator runs on.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapSpec {
    /// `L (sin q, 0, -cos q)`.
    Pendulum { length: f64 },
    /// `B q + offset` with `b` given row by row.
    Linear { b: Vec<Vec<f64>>, offset: Vec<f64> },
    /// Trained decoder; paths relative to the config file.
    Neurok {
        checkpoint: PathBuf,
        chart: PathBuf,
        mesh: PathBuf,
        #[serde(default)]
        sample_seed: u64,
    },
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    #[serde(default)]
    pub q: Vec<f64>,
    #[serde(default)]
    pub qdot: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySpec {
    pub targets: BoundaryTargets,
    #[serde(default)]
    pub init: Option<Vec<f64>>,
    #[serde(default)]
    pub options: FitOptions,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateFileConfig {
    #[serde(default = "schema")]
    pub schema_version: u32,
    pub map: MapSpec,
    #[serde(default)]
    pub potential: PotentialSpec,
    #[serde(default)]
    pub sim: SimConfig,
    /// Missing entries default to zero. Ignored when `boundary` is set.
    #[serde(default)]
    pub initial: InitialState,
    #[serde(default)]
    pub boundary: Option<BoundarySpec>,
    /// Write every n-th state as a mesh frame (learned maps only).
    #[serde(default = "one")]
    pub export_every: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalIkFileConfig {
    #[serde(default = "schema")]
    pub schema_version: u32,
    #[serde(default)]
    pub ik: IkConfig,
    #[serde(default)]
    pub sample_seed: u64,
}

impl Default for EvalIkFileConfig {
    fn default() -> Self {
        Self { schema_version: SCHEMA_VERSION, ik: IkConfig::default(), sample_seed: 0 }
    }
}
