//! TOML experiment configuration and the shipped presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::evaluation::{MaskSource, RmseKind};
use crate::losses::{GanMode, LossWeights};
use crate::networks::{EncoderDecoderConfig, FusionCombine, FusionNetConfig, GeneratorConfig};
use crate::training::{Stage, TrainConfig};

pub const DESK_SCALE: &str = include_str!("../configs/desk-scale.toml");
pub const PAPER_SCALE: &str = include_str!("../configs/paper-scale.toml");

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config file {0} not found")]
    Missing(PathBuf),
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Fusion,
    Naive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Width of the first encoder stage; 64 is the full-size network.
    pub base_channels: usize,
    pub resnet_blocks: usize,
    #[serde(default = "default_combine")]
    pub fusion_combine: FusionCombine,
}

fn default_combine() -> FusionCombine {
    FusionCombine::Concat
}

impl ModelConfig {
    pub fn generator_config(&self) -> GeneratorConfig {
        match self.kind {
            ModelKind::Fusion => GeneratorConfig::Fusion(
                FusionNetConfig::scaled(self.base_channels, self.resnet_blocks).with_combine(self.fusion_combine),
            ),
            ModelKind::Naive => {
                GeneratorConfig::Naive(EncoderDecoderConfig::scaled(self.base_channels, self.resnet_blocks))
            }
        }
    }
}

/// Where data comes from. Paths override the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Side length images are resized to (a multiple of 4).
    pub image_size: usize,
    /// Root of a paired dataset with `train/` and `test/` splits.
    #[serde(default)]
    pub shadow_root: Option<PathBuf>,
    /// Folder of clean images for inpainting pretraining.
    #[serde(default)]
    pub inpaint_dir: Option<PathBuf>,
    pub inpaint_count: usize,
    pub inpaint_val_count: usize,
    pub shadow_train_count: usize,
    pub shadow_test_count: usize,
    pub mask_coverage: [f64; 2],
}

/// One training stage; stage and seed come from the enclosing experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "one")]
    pub log_every: u64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub gan_mode: GanMode,
    #[serde(default = "disc_channels")]
    pub discriminator_channels: usize,
    #[serde(default = "extractor_channels")]
    pub extractor_channels: [usize; 5],
    #[serde(default)]
    pub extractor_weights: Option<PathBuf>,
}

fn one() -> u64 {
    1
}

fn disc_channels() -> usize {
    16
}

fn extractor_channels() -> [usize; 5] {
    [8, 16, 16, 32, 32]
}

impl StageConfig {
    pub fn train_config(&self, stage: Stage, seed: u64) -> TrainConfig {
        TrainConfig {
            stage,
            iterations: self.iterations,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            checkpoint_every: self.checkpoint_every,
            loss_weights: self.loss_weights,
            log_every: self.log_every,
            gan_mode: self.gan_mode,
            discriminator_channels: self.discriminator_channels,
            extractor_channels: self.extractor_channels,
            extractor_weights: self.extractor_weights.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub mask_source: MaskSource,
    #[serde(default)]
    pub rmse_kind: RmseKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// `full` or an ablation name.
    #[serde(default = "full")]
    pub variant: String,
    /// Fraction of the shadow training split to use.
    #[serde(default = "fraction_one")]
    pub fraction: f64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub eval: EvalConfig,
}

fn full() -> String {
    "full".into()
}

fn fraction_one() -> f64 {
    1.0
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn preset(name: &str) -> Option<Self> {
        let text = match name {
            "desk-scale" => DESK_SCALE,
            "paper-scale" => PAPER_SCALE,
            _ => return None,
        };
        Some(Self::from_toml(text).expect("shipped presets are valid"))
    }

    /// Reads a config file; a preset name is accepted in place of a path.
    pub fn load(path_or_preset: &str) -> Result<Self, ConfigError> {
        let path = Path::new(path_or_preset);
        if !path.exists() {
            return Self::preset(path_or_preset).ok_or_else(|| ConfigError::Missing(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.to_path_buf(), message: e.to_string() })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.data.image_size == 0 || !self.data.image_size.is_multiple_of(4) {
            return bad(format!("image_size {} must be a positive multiple of 4", self.data.image_size));
        }
        let [lo, hi] = self.data.mask_coverage;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad(format!("mask_coverage [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1"));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad(format!("fraction {} outside (0, 1]", self.fraction));
        }
        if self.variant != "full" && self.variant.parse::<crate::networks::Variant>().is_err() {
            return bad(format!("unknown variant `{}`", self.variant));
        }
        if self.model.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        for (name, path) in [("shadow_root", &self.data.shadow_root), ("inpaint_dir", &self.data.inpaint_dir)] {
            if let Some(p) = path {
                if !p.exists() {
                    return bad(format!("{name} {} does not exist", p.display()));
                }
            }
        }
        for (stage, s) in [(Stage::Pretrain, &self.pretrain), (Stage::Finetune, &self.finetune)] {
            s.train_config(stage, self.seed).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        match stage {
            Stage::Pretrain => self.pretrain.train_config(stage, self.seed),
            Stage::Finetune => self.finetune.train_config(stage, self.seed),
        }
    }
}
