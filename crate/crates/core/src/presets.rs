//! Desk-scale configurations shared by the examples, the CLI defaults and
//! the acceptance suite.

use crate::backbone::BackboneConfig;
use crate::config::ExperimentConfig;
use crate::contrastive::{ModelConfig, Stage1Config};
use crate::data::AugmentConfig;
use crate::feature_codec::{CodecConfig, Stage2Config};
use crate::ifmodule::IfConfig;
use crate::tasks::FinetuneConfig;

/// Side length of toy scenes and crops.
pub const TOY_SIZE: usize = 32;
pub const TOY_IMAGES: usize = 4096;
pub const TOY_CLASSES: usize = 6;
pub const TOY_DATA_SEED: u64 = 1;

pub fn toy_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            width: 8,
            blocks: [1, 1, 1, 1],
            proj_hidden: 64,
            embed_dim: 32,
        },
        ifmodule: IfConfig {
            hidden: 16,
            latent: 16,
            res_blocks: 1,
            ..Default::default()
        },
    }
}

/// Stage-1 settings for toy runs of `steps` steps.
///
/// The key momentum, learning rate and augmentation strength are weaker or
/// faster than the full-scale defaults so a tiny model makes progress within
/// a couple of thousand steps.
pub fn toy_stage1(alpha: f64, steps: usize) -> Stage1Config {
    Stage1Config {
        alpha,
        batch: 64,
        lr: 0.05,
        momentum: 0.9,
        max_steps: steps,
        warmup_epochs: 0,
        augment: AugmentConfig {
            crop: TOY_SIZE,
            scale_min: 0.5,
            jitter_prob: 0.5,
            brightness: 0.1,
            contrast: 0.1,
            saturation: 0.1,
            hue: 0.025,
            blur_prob: 0.0,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Side length of the images whose features the toy codec compresses.
pub const TOY_CODEC_SIZE: usize = 64;

pub fn toy_codec(feature_channels: usize) -> CodecConfig {
    CodecConfig {
        feature_channels,
        hidden: 32,
        latent: 32,
        hyper: 16,
        res_blocks: 1,
        ..Default::default()
    }
}

/// Factor applied to all four distortion weights in toy stage-2 runs.
///
/// Toy features carry a much larger squared error per element than
/// full-scale ones, so at the full-scale weights the rate term is a rounding
/// error in the loss. Adam is then blind to the common coefficient and every
/// coefficient trains to the same rate. At this scale rate and distortion
/// are of similar size and the coefficient moves the operating point.
pub const TOY_LAMBDA_SCALE: f64 = 1e-5;

/// Stage-2 settings for toy runs: full-scale weight ratios scaled by
/// [`TOY_LAMBDA_SCALE`].
pub fn toy_stage2(lambda_coef: f64, iterations: usize) -> Stage2Config {
    let full = Stage2Config::default();
    Stage2Config {
        lambda: full.lambda * TOY_LAMBDA_SCALE,
        lambda_stages: full.lambda_stages.map(|l| l * TOY_LAMBDA_SCALE),
        lambda_coef,
        iterations,
        batch: 8,
        lr: 3e-4,
    }
}

/// Stage-3 settings for toy runs: a tenth of the toy stage-1 learning rate.
pub fn toy_finetune() -> FinetuneConfig {
    FinetuneConfig {
        lr: toy_stage1(0.1, 0).lr / 10.0,
        steps: 1000,
        ..Default::default()
    }
}

/// The toy presets as one experiment config, matching `configs/toy.toml`.
/// Stage 1 crops toy-size views out of codec-size scenes.
pub fn toy_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.shapes_train = TOY_IMAGES;
    cfg.data.shapes_size = TOY_CODEC_SIZE;
    cfg.data.shapes_classes = TOY_CLASSES;
    cfg.data.shapes_seed = TOY_DATA_SEED;
    cfg.model = toy_model();
    cfg.stage1 = toy_stage1(0.1, 2000);
    cfg.codec = toy_codec(cfg.model.backbone.width);
    cfg.stage2 = toy_stage2(1.0, 50_000);
    cfg.finetune = toy_finetune();
    cfg
}
