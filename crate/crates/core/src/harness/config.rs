use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, CROP_MARGIN};
use crate::error::{Error, Result};
use crate::nn::ModelConfig;
use crate::optim::TrainSchedule;

/// Base seeds for the independent random streams of an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Weight initialization, keyed further by fold.
    pub init: u64,
    /// Batch order, augmentation and dropout, keyed further by fold.
    pub train: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { init: 0, train: 1 }
    }
}

/// Everything needed to rerun a cross-validation experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Manifest with train/test split and folds. Relative paths in a config
    /// file resolve against the file's directory.
    pub manifest: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seeds: Seeds,
    /// Margin around the union bounding box of the training masks.
    #[serde(default = "default_margin")]
    pub crop_margin: usize,
    pub out_dir: PathBuf,
}

fn default_folds() -> usize {
    5
}

fn default_margin() -> usize {
    CROP_MARGIN
}

impl ExperimentConfig {
    pub fn new(manifest: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            manifest: manifest.into(),
            model: ModelConfig::default(),
            schedule: TrainSchedule::default(),
            augment: AugmentConfig::default(),
            folds: default_folds(),
            seeds: Seeds::default(),
            crop_margin: CROP_MARGIN,
            out_dir: out_dir.into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.manifest, &mut cfg.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::file(path, e))
    }

    /// Static checks; the manifest itself is checked when it is loaded.
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::param(format!("need at least 2 folds, got {}", self.folds)));
        }
        if !self.manifest.is_file() {
            return Err(Error::param(format!("manifest {} does not exist", self.manifest.display())));
        }
        self.model.validate()?;
        self.schedule.validate()?;
        self.augment.validate()
    }
}
