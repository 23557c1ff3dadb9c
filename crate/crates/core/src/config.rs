//! Run configuration: one TOML document covering the scene, camera rig,
//! model, optimization, loss weights, output paths and seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_text;
use crate::losses::LossWeights;
use crate::synthscene::{ScenePreset, SceneConfig, SyntheticScene, TrajectoryConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dataset_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dataset_dir: PathBuf::from("data/toy"),
            run_dir: PathBuf::from("runs/toy"),
        }
    }
}

/// Scene selection: a named preset, optionally replaced wholesale by an
/// explicit configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub preset: ScenePreset,
    pub custom: Option<SceneConfig>,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            preset: ScenePreset::Rigid,
            custom: None,
        }
    }
}

impl SceneSection {
    pub fn scene(&self) -> Result<SyntheticScene> {
        SyntheticScene::new(self.custom.unwrap_or_else(|| self.preset.config()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds initialization, ray sampling, patch sampling and keypoints.
    pub seed: u64,
    pub scene: SceneSection,
    pub trajectory: TrajectoryConfig,
    pub train: TrainConfig,
    pub losses: LossWeights,
    pub output: OutputConfig,
    /// Samples per ray for rendering and evaluation.
    pub render_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneSection::default(),
            trajectory: TrajectoryConfig::default(),
            train: TrainConfig::default(),
            losses: LossWeights::default(),
            output: OutputConfig::default(),
            render_samples: 64,
        }
    }
}

impl RunConfig {
    /// Desk-scale preset for one CPU core.
    pub fn fast() -> Self {
        Self {
            train: TrainConfig::fast(),
            render_samples: TrainConfig::fast().samples,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.scene()?;
        self.trajectory.validate()?;
        self.train.validate()?;
        self.losses.validate()?;
        if self.render_samples < 2 {
            return Err(Error::Config("render_samples must be at least 2".into()));
        }
        Ok(())
    }

    /// Training config with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }
}
