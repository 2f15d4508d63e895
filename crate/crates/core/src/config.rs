//! Run configuration files.
//!
//! A training run is described by a TOML file with three sections:
//!
//! ```toml
//! [data]
//! dataset = "train.amds"
//!
//! [output]
//! dir = "runs/a3m"
//!
//! [train]
//! epochs = 20
//! seed = 7
//! lr_schedule = [{ epoch = 0, lr = 0.1 }, { epoch = 15, lr = 0.01 }]
//!
//! [train.loss]
//! mode = "a3m"
//! scale = 32.0
//! margin = 0.3
//!
//! [train.alpha]
//! alpha = 1.25
//! ```
//!
//! Unknown keys are rejected. Relative paths resolve against the directory
//! holding the config file. The effective config (defaults filled in, paths
//! made absolute) is what [`RunConfig::to_toml`] writes back out.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dataset: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub output: OutputSection,
    pub train: TrainConfig,
}

fn resolve(base: &Path, p: &Path) -> Result<PathBuf> {
    let joined = if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    };
    Ok(std::path::absolute(joined)?)
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.dataset = resolve(base, &cfg.data.dataset)?;
        cfg.output.dir = resolve(base, &cfg.output.dir)?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}
