//! The run configuration: one flat `key = value` file per run.

use std::path::{Path, PathBuf};

use dmlkit_core::backbone::{BackboneConfig, ConvSpec};
use dmlkit_core::data::{AugmentConfig, BatchMode, SplitMode, SplitSpec};
use dmlkit_core::losses::{HybridConfig, LossConfig, MarginSign, MsConfig, ProxyAnchorConfig};
use dmlkit_core::model::{AttentionMode, Descriptors, ModelConfig};
use dmlkit_core::optim::OptimConfig;
use dmlkit_core::train::{LossVariant, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    Folder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BatchKind {
    #[default]
    Uniform,
    Balanced,
}

/// Every knob of a run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub batch_mode: BatchKind,
    pub balanced_classes: usize,
    pub balanced_per_class: usize,

    pub dataset: DatasetKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    pub num_classes: usize,
    pub per_class: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub noise_sigma: f64,
    pub data_seed: u64,

    pub split_mode: SplitMode,
    pub train_class_fraction: f64,
    pub validation_fraction: f64,

    pub resize: usize,
    pub crop: usize,
    pub flip_prob: f64,

    pub local_channels: Vec<usize>,
    pub local_strides: Vec<usize>,
    pub global_channels: Vec<usize>,
    pub global_strides: Vec<usize>,

    pub zeta: f64,
    pub embedding_dim: usize,
    pub descriptors: Descriptors,
    pub soa: AttentionMode,
    pub loss: LossVariant,

    pub alpha: f64,
    pub delta: f64,
    pub gamma: f64,
    pub beta: f64,
    pub sigma: f64,
    pub ms_negative_margin_sign: MarginSign,
    pub lambda: f64,

    pub lr_model: f64,
    pub lr_proxy: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,

    /// Write the attention matrices of the first evaluation sample.
    pub dump_attention: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pa = ProxyAnchorConfig::default();
        let ms = MsConfig::default();
        let opt = OptimConfig::default();
        let aug = AugmentConfig::default();
        let split = SplitSpec::default();
        let bb = BackboneConfig::default();
        Self {
            seed: 0,
            epochs: 20,
            batch_size: 60,
            batch_mode: BatchKind::Uniform,
            balanced_classes: 2,
            balanced_per_class: 30,
            dataset: DatasetKind::Synthetic,
            data_dir: None,
            num_classes: 8,
            per_class: 200,
            image_height: 32,
            image_width: 32,
            noise_sigma: 0.35,
            data_seed: 0,
            split_mode: split.mode,
            train_class_fraction: split.train_class_fraction,
            validation_fraction: split.validation_fraction,
            resize: aug.resize,
            crop: aug.crop,
            flip_prob: aug.flip_prob,
            local_channels: bb.local_stage.iter().map(|s| s.channels).collect(),
            local_strides: bb.local_stage.iter().map(|s| s.stride).collect(),
            global_channels: bb.global_stage.iter().map(|s| s.channels).collect(),
            global_strides: bb.global_stage.iter().map(|s| s.stride).collect(),
            zeta: 1.0,
            embedding_dim: 512,
            descriptors: Descriptors::Both,
            soa: AttentionMode::On,
            loss: LossVariant::Hybrid,
            alpha: pa.alpha,
            delta: pa.delta,
            gamma: ms.gamma,
            beta: ms.beta,
            sigma: ms.sigma,
            ms_negative_margin_sign: ms.negative_margin_sign,
            lambda: HybridConfig::default().lambda,
            lr_model: opt.lr_model,
            lr_proxy: opt.lr_proxy,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
            dump_attention: false,
        }
    }
}

fn stage(field: &str, channels: &[usize], strides: &[usize]) -> Result<Vec<ConvSpec>, CliError> {
    if channels.len() != strides.len() {
        return Err(CliError::config(
            field,
            "channel and stride lists differ in length",
        ));
    }
    Ok(channels
        .iter()
        .zip(strides)
        .map(|(&channels, &stride)| ConvSpec { channels, stride })
        .collect())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    /// Cross-field checks; each owning module validates its own ranges.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.dataset == DatasetKind::Folder && self.data_dir.is_none() {
            return Err(CliError::config(
                "data_dir",
                "required when dataset = \"folder\"",
            ));
        }
        if self.dataset == DatasetKind::Synthetic {
            if self.num_classes < 2
                || self.per_class == 0
                || self.image_height == 0
                || self.image_width == 0
            {
                return Err(CliError::config(
                    "num_classes",
                    "synthetic data needs >= 2 classes and positive sizes",
                ));
            }
            if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
                return Err(CliError::config(
                    "noise_sigma",
                    "must be finite and non-negative",
                ));
            }
        }
        if self.batch_mode == BatchKind::Balanced
            && self.balanced_classes * self.balanced_per_class != self.batch_size
        {
            return Err(CliError::config(
                "batch_size",
                "balanced batches need batch_size = balanced_classes * balanced_per_class",
            ));
        }
        self.split_spec().validate()?;
        self.model_config()?.validate()?;
        self.train_config()?.validate()?;
        Ok(())
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            mode: self.split_mode,
            train_class_fraction: self.train_class_fraction,
            validation_fraction: self.validation_fraction,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        Ok(ModelConfig {
            backbone: BackboneConfig {
                input_height: self.crop,
                input_width: self.crop,
                in_channels: 3,
                kernel: 3,
                local_stage: stage("local_channels", &self.local_channels, &self.local_strides)?,
                global_stage: stage(
                    "global_channels",
                    &self.global_channels,
                    &self.global_strides,
                )?,
            },
            zeta: self.zeta,
            embedding_dim: self.embedding_dim,
            descriptors: self.descriptors,
            attention: self.soa,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            batch_mode: match self.batch_mode {
                BatchKind::Uniform => BatchMode::Uniform,
                BatchKind::Balanced => BatchMode::Balanced {
                    classes: self.balanced_classes,
                    per_class: self.balanced_per_class,
                },
            },
            augment: AugmentConfig {
                resize: self.resize,
                crop: self.crop,
                flip_prob: self.flip_prob,
            },
            loss: LossConfig {
                proxy_anchor: ProxyAnchorConfig {
                    alpha: self.alpha,
                    delta: self.delta,
                },
                ms: MsConfig {
                    gamma: self.gamma,
                    beta: self.beta,
                    sigma: self.sigma,
                    negative_margin_sign: self.ms_negative_margin_sign,
                },
                hybrid: HybridConfig {
                    lambda: self.lambda,
                },
            },
            variant: self.loss,
            optim: OptimConfig {
                lr_model: self.lr_model,
                lr_proxy: self.lr_proxy,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
            },
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_text();
        assert!(text.contains("lambda = 0.03"));
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_field() {
        let err = RunConfig::parse("epochz = 3\n").unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
        let err = RunConfig::parse("alpha = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");
        let err = RunConfig::parse("soa = \"sideways\"\n").unwrap_err();
        assert!(err.to_string().contains("sideways"), "{err}");
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::parse("epochs = 2\nloss = \"ms\"\nembedding_dim = 32\n").unwrap();
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.loss, LossVariant::Ms);
        assert_eq!(cfg.alpha, 32.0);
    }
}
