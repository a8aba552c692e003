//! Run configuration file: `seed` plus `[data] [model] [loss] [optim] [eval]`.

use std::path::{Path, PathBuf};

use bregkge::losses::LossSpec;
use bregkge::models::{Init, ModelFamily, ModelSpec};
use bregkge::synthetic::SyntheticSpec;
use bregkge::trainer::{Dropout, OptimConfig, OptimizerKind, Regularization, TrainConfig};
use serde::{Deserialize, Serialize};

pub const DATA_DIR_ENV: &str = "BREGKGE_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub loss: LossSpec,
    pub optim: OptimSection,
    #[serde(default)]
    pub eval: EvalSection,
}

/// Either a directory of `train/valid/test` files or a generated graph.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset root; relative paths resolve against the config file. Falls back to `$BREGKGE_DATA_DIR`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Subdirectory of the root, e.g. `FB15k-237`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(default = "train_file")]
    pub train: String,
    #[serde(default = "valid_file")]
    pub valid: String,
    #[serde(default = "test_file")]
    pub test: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

fn train_file() -> String {
    "train.txt".into()
}

fn valid_file() -> String {
    "valid.txt".into()
}

fn test_file() -> String {
    "test.txt".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: ModelFamily,
    #[serde(default)]
    pub dim: usize,
    #[serde(default)]
    pub init: Init,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    #[serde(default = "one")]
    pub decay: f64,
    #[serde(default)]
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_start: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regularization: Option<Regularization>,
    #[serde(default)]
    pub dropout: Dropout,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "five")]
    pub every: usize,
    /// Filter known true answers from every split when ranking.
    #[serde(default = "yes")]
    pub filtered: bool,
}

fn five() -> usize {
    5
}

fn yes() -> bool {
    true
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            every: 5,
            filtered: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text).map_err(|message| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative data and checkpoint paths absolute against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let abs = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        if let Some(root) = &self.data.root {
            self.data.root = Some(abs(root));
        }
        if let Some(ws) = &self.optim.warm_start {
            self.optim.warm_start = Some(abs(ws));
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            model: ModelSpec {
                family: self.model.family,
                dim: self.model.dim,
                init: self.model.init,
                seed: self.seed,
            },
            loss: self.loss.clone(),
            optim: OptimConfig {
                optimizer: self.optim.optimizer,
                lr: self.optim.lr,
                decay: self.optim.decay,
                patience: self.optim.patience,
                batch_size: self.optim.batch_size,
                max_epochs: self.optim.max_epochs,
                eval_every: self.eval.every,
            },
            regularization: self.optim.regularization.clone(),
            dropout: self.optim.dropout.clone(),
            warm_start: self.optim.warm_start.clone(),
        }
    }

    /// Directory holding the split files, when the data is not synthetic.
    pub fn data_dir(&self) -> Result<PathBuf, ConfigError> {
        let root = match &self.data.root {
            Some(r) => r.clone(),
            None => std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).ok_or_else(|| {
                ConfigError::Invalid(format!("no [data] root and {DATA_DIR_ENV} is unset"))
            })?,
        };
        Ok(match &self.data.dataset {
            Some(d) => root.join(d),
            None => root,
        })
    }
}
