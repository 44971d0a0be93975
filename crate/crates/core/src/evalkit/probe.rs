//! MSE-trained decoders that map frozen features back to pixels, used to see
//! what the information filter keeps.

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ms_ssim, psnr, Psnr};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::nn::{Adam, Conv2d, ConvTranspose2d, Ctx, Layer, Module, Optimizer, ResBlock, Sequential};
use crate::tasks::FrozenFrontEnd;

/// Which tensor the probe reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Backbone head output.
    BeforeIf,
    /// Information-filter output, the omnipotent features.
    AfterIf,
}

impl FeatureSource {
    pub fn extract(self, frontend: &FrozenFrontEnd, x: &Array4<f64>) -> Result<Array4<f64>> {
        match self {
            FeatureSource::BeforeIf => frontend.net().head.forward_batch(x),
            FeatureSource::AfterIf => frontend.features(x),
        }
    }
}

/// Shared by both probes so they differ only in their input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub res_blocks: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 64,
            res_blocks: 2,
            lr: 1e-4,
            steps: 20_000,
            batch: 16,
        }
    }
}

/// Two rounds of residual blocks and 2× transposed-conv upsampling.
#[derive(Clone, Debug)]
pub struct ProbeDecoder {
    pub net: Sequential,
    pub source: FeatureSource,
}

crate::impl_module!(ProbeDecoder { net });

const SLOPE: f64 = 0.01;

impl ProbeDecoder {
    pub fn new(in_channels: usize, source: FeatureSource, cfg: &ProbeConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.hidden;
        let mut layers = vec![Layer::Conv(Conv2d::new(in_channels, h, 3, 1, 1, true, rng)), Layer::LeakyRelu(SLOPE)];
        for _ in 0..2 {
            for _ in 0..cfg.res_blocks {
                layers.push(Layer::Res(ResBlock::new(h, SLOPE, rng)));
            }
            layers.push(Layer::ConvT(ConvTranspose2d::new(h, h, 3, 2, 1, 1, true, rng)));
            layers.push(Layer::LeakyRelu(SLOPE));
        }
        layers.push(Layer::Conv(Conv2d::new(h, 3, 3, 1, 1, true, rng)));
        ProbeDecoder {
            net: Sequential::new(layers),
            source,
        }
    }

    /// Image in `[0, 1]` from a `[1, C, h, w]` feature batch entry.
    pub fn reconstruct(&self, feature: &Array4<f64>) -> Vec<Array3<f64>> {
        let y = self.net.forward(feature);
        y.outer_iter().map(|im| im.mapv(|v| v.clamp(0.0, 1.0))).collect()
    }
}

/// Per-image reconstruction quality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeQuality {
    pub psnr: Psnr,
    pub ms_ssim: f64,
}

/// Trains a probe with MSE against the unnormalized `[0, 1]` images.
pub fn train_probe_decoder(
    frontend: &FrozenFrontEnd,
    source: FeatureSource,
    images: &[Array3<f64>],
    norm: &Normalization,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<(ProbeDecoder, Vec<f64>)> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images for the probe decoder".into()));
    }
    let normalized: Vec<_> = images.iter().map(|im| norm.apply_unit(im)).collect();
    let feats = batched(&normalized, 32, |x| source.extract(frontend, x))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dec = ProbeDecoder::new(feats.dim().1, source, cfg, &mut rng);
    let mut opt = Adam::new(cfg.lr);
    let batch = cfg.batch.clamp(1, images.len());
    let mut order = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if order.len() < batch {
            let mut fresh: Vec<usize> = (0..images.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let idx: Vec<usize> = order.drain(..batch).collect();
        let x = feats.select(Axis(0), &idx);
        let views: Vec<_> = idx.iter().map(|&i| images[i].view()).collect();
        let target = ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        dec.zero_grad();
        let (y, cache) = dec.net.forward_cached(&x, Ctx::train(1));
        if y.dim() != target.dim() {
            return Err(Error::Shape(format!("probe output {:?} vs images {:?}", y.dim(), target.dim())));
        }
        let diff = &y - &target;
        let loss = diff.mapv(|v| v * v).mean().unwrap();
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("probe loss diverged at step {step}")));
        }
        let dy = diff * (2.0 / y.len() as f64);
        dec.net.backward(cache, &dy);
        opt.step(&mut dec, "probe");
        losses.push(loss);
    }
    frontend.verify()?;
    Ok((dec, losses))
}

/// Reconstructs each image through its probe and scores it against the
/// original. Images of any size are edge-padded for the front end and the
/// reconstruction is cropped back.
pub fn probe_quality(
    dec: &ProbeDecoder,
    frontend: &FrozenFrontEnd,
    images: &[Array3<f64>],
    norm: &Normalization,
) -> Result<Vec<(Array3<f64>, ProbeQuality)>> {
    images
        .iter()
        .map(|im| {
            let (x, (h, w)) = crate::data::prepare(im, norm);
            let feats = dec.source.extract(frontend, &x.insert_axis(Axis(0)))?;
            let r = dec.reconstruct(&feats).remove(0).slice(ndarray::s![.., ..h, ..w]).to_owned();
            let q = ProbeQuality {
                psnr: psnr(&r, im, 1.0)?,
                ms_ssim: ms_ssim(&r, im, 1.0)?,
            };
            Ok((r, q))
        })
        .collect()
}

fn batched(images: &[Array3<f64>], batch: usize, f: impl Fn(&Array4<f64>) -> Result<Array4<f64>>) -> Result<Array4<f64>> {
    let mut parts = Vec::new();
    for chunk in images.chunks(batch) {
        let views: Vec<_> = chunk.iter().map(|a| a.view()).collect();
        let x = ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        parts.push(f(&x)?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}
