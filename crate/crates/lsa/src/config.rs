//! Run configuration: one JSON file describing dataset, backbones, training
//! schedule, sampler, and evaluation. Commands resolve flag overrides into
//! this struct and write the resolved copy next to their outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbones::{CodecSpec, DenoiserSpec, FeatureExtractorSpec};
use crate::error::{LsaError, Result};
use crate::eval::EvalConfig;
use crate::loss::MaskVariant;
use crate::scenes::SpecDistribution;
use crate::trainer::{ScheduleMode, TrainSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub distribution: SpecDistribution,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_count: 1000,
            test_count: 200,
            num_frames: 8,
            height: 64,
            width: 64,
            distribution: SpecDistribution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub codec: CodecSpec,
    pub denoiser: DenoiserSpec,
    pub extractor: FeatureExtractorSpec,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            codec: CodecSpec::default(),
            denoiser: DenoiserSpec::default(),
            extractor: FeatureExtractorSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 3e-3,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: ScheduleMode,
    pub epochs: usize,
    pub lambda_feat: f64,
    pub variant: MaskVariant,
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub weight_decay: f64,
    /// drop the feature term entirely (diffusion-only baseline)
    pub diffusion_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: ScheduleMode::Staged,
            epochs: 12,
            lambda_feat: 0.3,
            variant: MaskVariant::Hybrid,
            alpha: 4.0,
            learning_rate: 3e-3,
            batch_size: 8,
            grad_clip: 1.0,
            weight_decay: 0.0,
            diffusion_only: false,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self, seed: u64) -> Result<TrainSchedule> {
        let mut s = if self.diffusion_only {
            TrainSchedule::diffusion_only(self.epochs, self.learning_rate, self.batch_size, seed)
        } else {
            match self.mode {
                ScheduleMode::Staged => TrainSchedule::staged(
                    self.epochs,
                    self.lambda_feat,
                    self.variant,
                    self.alpha,
                    self.learning_rate,
                    self.batch_size,
                    seed,
                ),
                ScheduleMode::Joint => TrainSchedule::joint(
                    self.epochs,
                    self.lambda_feat,
                    self.variant,
                    self.alpha,
                    self.learning_rate,
                    self.batch_size,
                    seed,
                ),
            }
        };
        s.grad_clip = self.grad_clip;
        s.weight_decay = self.weight_decay;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 50,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
        }
    }
}

impl SamplerConfig {
    pub fn schedule(&self) -> Result<crate::diffusion::NoiseSchedule> {
        crate::diffusion::NoiseSchedule::karras(
            self.num_steps,
            self.sigma_min,
            self.sigma_max,
            self.rho,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub backbones: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LsaError::io(path.display().to_string(), e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| LsaError::malformed(path.display().to_string(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| LsaError::io(parent.display().to_string(), e))?;
        }
        let json = serde_json::to_string_pretty(self).expect("config serialization");
        std::fs::write(path, json).map_err(|e| LsaError::io(path.display().to_string(), e))
    }

    pub fn validate(&self) -> Result<()> {
        let ds = self.backbones.codec.downsample.max(self.backbones.extractor.patch_size);
        if self.data.height % ds != 0 || self.data.width % ds != 0 {
            return Err(LsaError::invalid(
                "RunConfig",
                format!(
                    "{}x{} frames not divisible by backbone factor {ds}",
                    self.data.width, self.data.height
                ),
            ));
        }
        if self.data.num_frames < 2 {
            return Err(LsaError::invalid("RunConfig", "num_frames must be >= 2"));
        }
        self.train.schedule(self.seed)?;
        self.sampler.schedule()?;
        Ok(())
    }
}
