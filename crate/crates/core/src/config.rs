//! Run configuration: one JSON document drives data generation, both
//! training phases, and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::gtc::GtcConfig;
use crate::loss::LossWeights;
use crate::synth::SceneConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretune,
    PromptTune,
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Phase> {
        match s {
            "pretune" => Ok(Phase::Pretune),
            "prompt-tune" => Ok(Phase::PromptTune),
            other => Err(Error::Param(format!(
                "unknown phase {other:?}; expected pretune or prompt-tune"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Scenes per optimizer step; gradients are averaged over the batch.
    pub batch: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            momentum: 0.9,
            epochs: 20,
            batch: 4,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Param(format!("step size must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Param(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Param("epochs and batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// Optional path defaults; command-line flags take precedence.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub phase: Option<Phase>,
    pub scene: SceneConfig,
    pub backbone: BackboneConfig,
    pub detector: DetectorConfig,
    pub gtc: GtcConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("cannot read config {}: {e}", path.display()),
            ))
        })?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Param(format!("bad config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.backbone.validate(self.scene.height, self.scene.width)?;
        self.detector.validate(self.backbone.embed_dim)?;
        let (fh, fw) = self
            .backbone
            .final_grid(self.scene.height, self.scene.width);
        if self.detector.queries > fh * fw {
            return Err(Error::Param(format!(
                "{} queries exceed the {fh}x{fw} final feature grid",
                self.detector.queries
            )));
        }
        self.gtc.validate()?;
        if self.gtc.classes != self.detector.classes || self.scene.classes != self.detector.classes
        {
            return Err(Error::Param(format!(
                "class counts disagree: scenes {}, detector {}, classifier {}",
                self.scene.classes, self.detector.classes, self.gtc.classes
            )));
        }
        self.loss.validate()?;
        self.optim.validate()?;
        Ok(())
    }

    /// (width, height) of the scene frame in pixels.
    pub fn frame(&self) -> (f64, f64) {
        (self.scene.width as f64, self.scene.height as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn default_json_round_trips() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(&cfg).unwrap());
    }

    #[test]
    fn empty_document_uses_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.gtc.groups, 64);
        assert_eq!(cfg.detector.queries, 64);
        assert_eq!(cfg.optim.momentum, 0.9);
    }

    #[test]
    fn class_count_disagreement_is_caught() {
        let mut cfg = RunConfig::default();
        cfg.scene.classes = 2;
        assert!(matches!(cfg.validate(), Err(Error::Param(_))));
    }

    #[test]
    fn too_many_queries_are_caught() {
        let mut cfg = RunConfig::default();
        cfg.detector.queries = 65; // final grid is 8x8
        assert!(matches!(cfg.validate(), Err(Error::Param(_))));
    }

    #[test]
    fn phase_parses_both_spellings() {
        assert_eq!("pretune".parse::<Phase>().unwrap(), Phase::Pretune);
        assert_eq!("prompt-tune".parse::<Phase>().unwrap(), Phase::PromptTune);
        assert!("finetune".parse::<Phase>().is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = RunConfig::load(Path::new("/nonexistent/cfg.json")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }
}
