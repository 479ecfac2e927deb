//! Run configuration file (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::synth::{GeneratorConfig, SignalSpec};
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigFileError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("cannot serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Label column used as the regression target.
    pub target: String,
    /// Covariates to regress out; every non-target label column when unset.
    pub covariates: Option<Vec<String>>,
    /// Skip covariate regression entirely.
    pub regress_covariates: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            out_dir: None,
            target: "score".to_string(),
            covariates: None,
            regress_covariates: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretConfig {
    pub threshold: f64,
    pub emit_attention: bool,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        Self {
            threshold: 0.9,
            emit_attention: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub generator: GeneratorConfig,
    pub signal: SignalSpec,
    /// When set, `signal.noise_sd` is replaced by the value giving this oracle R^2.
    pub target_r2: Option<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            signal: SignalSpec::default(),
            target_r2: Some(0.5),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub interpret: InterpretConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigFileError> {
        toml::from_str(text).map_err(|source| ConfigFileError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigFileError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigFileError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> Result<String, ConfigFileError> {
        Ok(toml::to_string_pretty(self)?)
    }
}
