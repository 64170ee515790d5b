use std::fs;
use std::path::{Path, PathBuf};

use refbox::refertoy::ToySpec;
use refbox::trainer::TrainConfig;
use refbox::{Error, Result};
use serde::{Deserialize, Serialize};

/// Where feature maps come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// `<task_id>.rbf` files in the features directory.
    #[default]
    Files,
    /// Rendered in memory from the scene descriptions in the dataset.
    Render,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dataset: Option<PathBuf>,
    /// Defaults to the directory holding the dataset.
    pub features: Option<PathBuf>,
    pub provider: ProviderKind,
    /// Generate training scenes in memory instead of reading a dataset.
    pub toy: Option<ToySpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.dataset, &mut cfg.data.features].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        match (&self.data.dataset, &self.data.toy) {
            (None, None) => Err(Error::Config("set data.dataset or data.toy".into())),
            (Some(_), Some(_)) => Err(Error::Config("data.dataset and data.toy are exclusive".into())),
            (_, Some(spec)) => spec.validate().map_err(|e| Error::Config(e.to_string())),
            _ => Ok(()),
        }
    }
}
