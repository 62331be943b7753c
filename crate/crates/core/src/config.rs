//! Experiment configuration file.
//!
//! A single TOML document with a `version` key and one table per component:
//!
//! ```toml
//! version = 1
//! seed = 2022
//! out_dir = "runs/default"
//! methods = ["FT", "WCA", "KLD", "FMP", "MAML", "MAML_FMP"]
//!
//! [model]      # ModelConfig
//! [loss]       # LossConfig
//! [data]       # SynthConfig (generation specs)
//! [decode]     # DecodeConfig
//! [baseline]   # TrainerConfig for the two baselines
//! [expansion]  # TrainerConfig shared by the expansion methods
//! ```
//!
//! Every table is optional and falls back to its defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::DecodeConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::trainer::{Method, OptimizerKind, Schedule, TrainerConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config version {found} is not supported (expected {CONFIG_VERSION})")]
    Version { found: u32 },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub methods: Vec<Method>,
    /// Adds the wall-clock column to report files. Off by default so that
    /// reports are byte-identical across runs; timings always go to
    /// `timing.csv`.
    pub report_timing: bool,
    /// Checkpoint the `train` subcommand starts expansion methods from.
    pub init_checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub data: SynthConfig,
    pub decode: DecodeConfig,
    pub baseline: TrainerConfig,
    pub expansion: TrainerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = SynthConfig::default();
        Self {
            version: CONFIG_VERSION,
            seed: 2022,
            out_dir: PathBuf::from("runs/default"),
            methods: Method::ALL.to_vec(),
            report_timing: false,
            init_checkpoint: None,
            model: ModelConfig {
                feature_dim: data.feature_dim,
                vocab_size: data.num_symbols + 2,
                ..ModelConfig::default()
            },
            loss: LossConfig::default(),
            data,
            decode: DecodeConfig::default(),
            baseline: TrainerConfig {
                method: Method::FT,
                epochs: 12,
                batch_size: 8,
                lr_scale: 1.0,
                optimizer: OptimizerKind::Adam,
                schedule: Schedule::Noam,
                ..TrainerConfig::default()
            },
            expansion: TrainerConfig {
                epochs: 4,
                batch_size: 8,
                lr_scale: 0.5,
                beta: 3.0,
                ..TrainerConfig::default()
            },
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl ExperimentConfig {
    /// Parses a config, filling every missing key from [`Default`]. Tables
    /// are merged key by key, so `[expansion]` with only `lr_scale` keeps
    /// the experiment's expansion epochs rather than the trainer's.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let user: toml::Table = toml::from_str(text)?;
        let mut merged = toml::Table::try_from(Self::default())?;
        merge(&mut merged, user);
        let cfg: ExperimentConfig = merged.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != CONFIG_VERSION {
            return Err(ConfigError::Version { found: self.version });
        }
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(|e| inv(&e))?;
        self.loss.validate().map_err(|e| inv(&e))?;
        self.decode.validate().map_err(|e| inv(&e))?;
        self.baseline.validate().map_err(|e| inv(&e))?;
        for &m in &self.methods {
            TrainerConfig {
                method: m,
                ..self.expansion.clone()
            }
            .validate()
            .map_err(|e| inv(&e))?;
        }
        if self.model.feature_dim != self.data.feature_dim {
            return Err(ConfigError::Invalid(format!(
                "model.feature_dim {} differs from data.feature_dim {}",
                self.model.feature_dim, self.data.feature_dim
            )));
        }
        if self.model.vocab_size != self.data.num_symbols + 2 {
            return Err(ConfigError::Invalid(format!(
                "model.vocab_size must be data.num_symbols + 2 = {}",
                self.data.num_symbols + 2
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(m) = self.methods.iter().find(|m| !seen.insert(**m)) {
            return Err(ConfigError::Invalid(format!("method {m} listed twice")));
        }
        Ok(())
    }
}
