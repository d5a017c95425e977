//! TOML run configuration for `train`.

use std::path::{Path, PathBuf};

use animator_core::data::SceneConfig;
use animator_core::eval::{toy_model, toy_scene};
use animator_core::{ModelConfig, TrainConfig};
use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

/// ```toml
/// preset = "toy"
/// data = "corpus/"
/// out = "runs/toy"
///
/// [train]
/// steps = 5000
/// learning_rate = 2e-5
/// ```
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `toy` or `base`; ignored when `model` is given.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> anyhow::Result<ModelConfig> {
        match (&self.model, self.preset.as_deref()) {
            (Some(m), _) => Ok(*m),
            (None, p) => model_preset(p.unwrap_or("toy")),
        }
    }
}

pub fn model_preset(name: &str) -> anyhow::Result<ModelConfig> {
    match name {
        "toy" => Ok(toy_model()),
        "base" => Ok(ModelConfig::default()),
        other => bail!("unknown model preset `{other}` (expected toy or base)"),
    }
}

pub fn scene_preset(name: &str) -> anyhow::Result<SceneConfig> {
    match name {
        "toy" => Ok(toy_scene()),
        "base" => Ok(SceneConfig::default()),
        other => bail!("unknown scene preset `{other}` (expected toy or base)"),
    }
}
