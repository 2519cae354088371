//! The JSON run configuration shared by all subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datapipe::{CameraMotion, FilterThresholds, SceneConfig};
use crate::error::{Error, Result};
use crate::infer::InferConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub count: usize,
    pub seed: u64,
    pub scene: SceneConfig,
    /// Camera motion of clip `i` is `motions[i % len]`.
    pub motions: Vec<CameraMotion>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            count: 8,
            seed: 0,
            scene: SceneConfig::default(),
            motions: vec![CameraMotion::Translate, CameraMotion::Orbit, CameraMotion::Static],
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.motions.is_empty() {
            return Err(Error::invalid("generate.motions is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    /// Dataset root holding `clip_*` directories.
    pub data: Option<PathBuf>,
    /// Fine-tune the interpolation model from `base_checkpoint`.
    pub interp: bool,
    pub base_checkpoint: Option<PathBuf>,
    #[serde(flatten)]
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct InferSection {
    pub checkpoint: Option<PathBuf>,
    pub interp_checkpoint: Option<PathBuf>,
    /// A PNG image, a clip directory or a dataset root.
    pub input: Option<PathBuf>,
    #[serde(flatten)]
    pub config: InferConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Root of `infer` outputs.
    pub predictions: Option<PathBuf>,
    /// Dataset root with the matching clips.
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSection {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub thresholds: FilterThresholds,
    /// Sampler steps of the reference model.
    pub steps: usize,
    pub seed: u64,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            data: None,
            checkpoint: None,
            thresholds: FilterThresholds::default(),
            steps: InferConfig::default().steps,
            seed: 0,
        }
    }
}

/// Everything a run can be configured with; each subcommand reads its own
/// section.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub generate: GenerateConfig,
    pub train: TrainSection,
    pub infer: InferSection,
    pub eval: EvalSection,
    pub filter: FilterSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        crate::datapipe::read_json(path)
    }
}

/// `Some` value or an error naming the missing setting.
pub(crate) fn required<'a>(value: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::invalid(format!("{name} is not set (config file or flag)")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_files_fill_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"train": {"steps": 7, "data": "d"}, "infer": {"ensemble": 3}}"#).unwrap();
        assert_eq!(cfg.train.config.steps, 7);
        assert_eq!(cfg.train.data.as_deref(), Some(Path::new("d")));
        assert_eq!(cfg.infer.config.ensemble, 3);
        assert_eq!(cfg.infer.config.steps, 3);
        assert_eq!(cfg.generate, GenerateConfig::default());
        let cfg: RunConfig = serde_json::from_str(r#"{"train": {"optimizer": {"lr": 0.01}}}"#).unwrap();
        let expected = TrainConfig::default().optimizer;
        assert_eq!(cfg.train.config.optimizer.lr, 0.01);
        assert_eq!(cfg.train.config.optimizer.weight_decay, expected.weight_decay);
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"optimizer": {"rate": 1}}}"#).is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"filter": {"thresholds": {"delta1": 0.7}}}"#).unwrap();
        assert_eq!(cfg.filter.thresholds.delta1, 0.7);
        assert_eq!(cfg.filter.thresholds.similarity, FilterThresholds::default().similarity);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
