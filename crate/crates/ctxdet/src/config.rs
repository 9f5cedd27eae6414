//! Experiment configuration: defaults, file loading (TOML or JSON), CLI
//! overrides, and validation. Every run artifact embeds the resolved config
//! so outputs can be regenerated from it alone.

use crate::context::CtFlags;
use crate::detector::{DetectorConfig, TransferConfig, Variant};
use crate::error::{Error, Result};
use crate::evaluation::Interpolation;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Precision::Single),
            "double" => Ok(Precision::Double),
            other => Err(Error::Config(format!(
                "unknown precision {other:?} (expected single or double)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 4e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch: 16,
        }
    }
}

/// Run lengths and decay milestones, scaled down from the published schedule
/// (4k iterations with drops at 3k and 3.5k) to desk-size runs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub pretrain_steps: u64,
    pub pretrain_milestones: Vec<(u64, f64)>,
    pub finetune_steps: u64,
    pub finetune_milestones: Vec<(u64, f64)>,
    pub incremental_steps: u64,
    pub incremental_milestones: Vec<(u64, f64)>,
    pub hnm_ratio: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            pretrain_steps: 2000,
            pretrain_milestones: vec![(1500, 0.1), (1750, 0.1)],
            finetune_steps: 400,
            finetune_milestones: vec![(300, 0.1), (350, 0.1)],
            incremental_steps: 400,
            // single drop at 60% of the run, following the incremental recipe
            incremental_milestones: vec![(240, 0.1)],
            hnm_ratio: 3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
    pub confusion_score_floor: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            interpolation: Interpolation::AllPoint,
            confusion_score_floor: 0.3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub shots: usize,
    pub trial: u64,
    pub variant: Variant,
    pub precision: Precision,
    pub out_dir: Option<PathBuf>,
    pub optimizer: OptimizerConfig,
    pub runs: RunConfig,
    pub ct: CtFlags,
    pub transfer: TransferConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            shots: 5,
            trial: 0,
            variant: Variant::Full,
            precision: Precision::Single,
            out_dir: None,
            optimizer: OptimizerConfig::default(),
            runs: RunConfig::default(),
            ct: CtFlags::default(),
            transfer: TransferConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let is_json = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("json"))
            .unwrap_or(false)
            || text.trim_start().starts_with('{');
        let cfg: ExperimentConfig = if is_json {
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.optimizer.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.optimizer.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if self.optimizer.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.shots == 0 {
            return Err(Error::Config("shots must be >= 1".into()));
        }
        Ok(())
    }

    /// Flags that only make sense after source pretraining conflict with the
    /// pretrain command.
    pub fn validate_for_pretrain(&self) -> Result<()> {
        self.validate()?;
        if self.variant == Variant::UnloadAtTest {
            return Err(Error::Config(
                "conflicting flags: variant unload-at-test applies to fine-tuning and \
                 evaluation, not pretraining"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn detector(&self) -> DetectorConfig {
        let bench = crate::synthdata::default_benchmark();
        DetectorConfig::toy(bench.num_source(), bench.num_target())
    }

    pub fn train_cfg_pretrain(&self) -> crate::detector::TrainCfg {
        crate::detector::TrainCfg {
            steps: self.runs.pretrain_steps,
            batch: self.optimizer.batch,
            learning_rate: self.optimizer.learning_rate,
            momentum: self.optimizer.momentum,
            weight_decay: self.optimizer.weight_decay,
            milestones: self.runs.pretrain_milestones.clone(),
            hnm_ratio: self.runs.hnm_ratio,
            seed: self.seed,
        }
    }

    pub fn train_cfg_finetune(&self, seed: u64) -> crate::detector::TrainCfg {
        crate::detector::TrainCfg {
            steps: self.runs.finetune_steps,
            batch: self.optimizer.batch,
            learning_rate: self.optimizer.learning_rate,
            momentum: self.optimizer.momentum,
            weight_decay: self.optimizer.weight_decay,
            milestones: self.runs.finetune_milestones.clone(),
            hnm_ratio: self.runs.hnm_ratio,
            seed,
        }
    }

    pub fn train_cfg_incremental(&self, seed: u64) -> crate::detector::TrainCfg {
        crate::detector::TrainCfg {
            steps: self.runs.incremental_steps,
            batch: self.optimizer.batch,
            learning_rate: self.optimizer.learning_rate,
            momentum: self.optimizer.momentum,
            weight_decay: self.optimizer.weight_decay,
            milestones: self.runs.incremental_milestones.clone(),
            hnm_ratio: self.runs.hnm_ratio,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
        ExperimentConfig::default().validate_for_pretrain().unwrap();
    }

    #[test]
    fn toml_and_json_round_trip() {
        let cfg = ExperimentConfig {
            shots: 3,
            trial: 7,
            variant: Variant::NonLocal,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();

        let toml_path = dir.path().join("run.toml");
        std::fs::write(&toml_path, toml::to_string(&cfg).unwrap()).unwrap();
        let from_toml = ExperimentConfig::load(&toml_path).unwrap();
        assert_eq!(from_toml.shots, 3);
        assert_eq!(from_toml.variant, Variant::NonLocal);

        let json_path = dir.path().join("run.json");
        std::fs::write(&json_path, serde_json::to_string(&cfg).unwrap()).unwrap();
        let from_json = ExperimentConfig::load(&json_path).unwrap();
        assert_eq!(from_json.trial, 7);
    }

    #[test]
    fn conflicting_pretrain_flags_rejected() {
        let cfg = ExperimentConfig {
            variant: Variant::UnloadAtTest,
            ..Default::default()
        };
        let err = cfg.validate_for_pretrain().unwrap_err().to_string();
        assert!(err.contains("unload-at-test"), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.optimizer.momentum = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.shots = 0;
        assert!(cfg.validate().is_err());
    }
}
