//! Information-filtering autoencoder: encoder, factorized entropy model and
//! decoder placed between backbone head and tail.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::entropy_models::quantize::add_uniform_noise;
use crate::entropy_models::FactorizedDensity;
use crate::error::{Error, Result};
use crate::feature::{check_channels, check_divisible};
use crate::nn::{Conv2d, ConvTranspose2d, Ctx, Layer, ResBlock, SeqCache, Sequential};

/// Encoder downsampling relative to its input.
pub const IF_DOWNSAMPLE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IfConfig {
    pub hidden: usize,
    pub latent: usize,
    pub res_blocks: usize,
    pub filters: Vec<usize>,
    pub init_scale: f64,
    pub leaky_slope: f64,
}

impl Default for IfConfig {
    fn default() -> Self {
        IfConfig {
            hidden: 128,
            latent: 128,
            res_blocks: 3,
            filters: vec![3, 3, 3, 3],
            init_scale: 10.0,
            leaky_slope: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct IfModule {
    pub encoder: Sequential,
    pub decoder: Sequential,
    pub entropy: FactorizedDensity,
    in_channels: usize,
    latent_channels: usize,
}

crate::impl_module!(IfModule { encoder, decoder, entropy });

/// A noise-relaxed latent together with the seed that produced its noise.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedLatent {
    pub values: Array4<f64>,
    pub noise_seed: u64,
}

/// Adds `U(-1/2, 1/2)` noise drawn from a stream seeded with `seed`.
pub fn relax(y: &Array4<f64>, seed: u64) -> RelaxedLatent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = y.as_standard_layout().to_owned();
    add_uniform_noise(values.as_slice_mut().unwrap(), &mut rng);
    RelaxedLatent { values, noise_seed: seed }
}

#[derive(Debug)]
pub struct IfCache {
    enc: SeqCache,
    dec: SeqCache,
}

/// Result of a training-mode pass.
#[derive(Debug)]
pub struct IfTrainOutput {
    pub f: Array4<f64>,
    pub y_relaxed: Array4<f64>,
}

fn res_stack<R: Rng + ?Sized>(ch: usize, n: usize, slope: f64, rng: &mut R) -> Vec<Layer> {
    (0..n).map(|_| Layer::Res(ResBlock::new(ch, slope, rng))).collect()
}

impl IfModule {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, cfg: &IfConfig, rng: &mut R) -> Self {
        let (n, cy, s) = (cfg.hidden, cfg.latent, cfg.leaky_slope);
        let mut enc = vec![Layer::Conv(Conv2d::new(in_channels, n, 3, 2, 1, true, rng)), Layer::LeakyRelu(s)];
        enc.extend(res_stack(n, cfg.res_blocks, s, rng));
        enc.push(Layer::Conv(Conv2d::new(n, n, 3, 2, 1, true, rng)));
        enc.push(Layer::LeakyRelu(s));
        enc.extend(res_stack(n, cfg.res_blocks, s, rng));
        enc.push(Layer::Conv(Conv2d::new(n, cy, 3, 2, 1, true, rng)));

        let mut dec = vec![Layer::ConvT(ConvTranspose2d::new(cy, n, 3, 2, 1, 1, true, rng)), Layer::LeakyRelu(s)];
        dec.extend(res_stack(n, cfg.res_blocks, s, rng));
        dec.push(Layer::ConvT(ConvTranspose2d::new(n, n, 3, 2, 1, 1, true, rng)));
        dec.push(Layer::LeakyRelu(s));
        dec.extend(res_stack(n, cfg.res_blocks, s, rng));
        dec.push(Layer::ConvT(ConvTranspose2d::new(n, in_channels, 3, 2, 1, 1, true, rng)));

        IfModule {
            encoder: Sequential::new(enc),
            decoder: Sequential::new(dec),
            entropy: FactorizedDensity::new(cy, &cfg.filters, cfg.init_scale, rng),
            in_channels,
            latent_channels: cy,
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn encode(&self, h: &Array4<f64>) -> Result<Array4<f64>> {
        check_channels(h, self.in_channels, "IF encoder")?;
        check_divisible(h, IF_DOWNSAMPLE, "IF encoder")?;
        Ok(self.encoder.forward(h))
    }

    pub fn decode(&self, y: &Array4<f64>) -> Result<Array4<f64>> {
        check_channels(y, self.latent_channels, "IF decoder")?;
        Ok(self.decoder.forward(y))
    }

    /// Deterministic omnipotent features: the un-noised latent decoded.
    pub fn features(&self, h: &Array4<f64>) -> Result<Array4<f64>> {
        self.decode(&self.encode(h)?)
    }

    /// Total bits of a latent under the factorized model.
    pub fn entropy_bits(&self, y: &Array4<f64>) -> Result<f64> {
        check_channels(y, self.latent_channels, "IF entropy model")?;
        let b = self.entropy.bits(y);
        if !b.is_finite() {
            return Err(Error::Numerical("non-finite latent likelihood".into()));
        }
        Ok(b)
    }

    /// Training pass: encode, relax with uniform noise (when `noise`), decode.
    pub fn forward_train<R: Rng + ?Sized>(
        &mut self,
        h: &Array4<f64>,
        ctx: Ctx,
        noise: bool,
        rng: &mut R,
    ) -> Result<(IfTrainOutput, IfCache)> {
        check_channels(h, self.in_channels, "IF encoder")?;
        check_divisible(h, IF_DOWNSAMPLE, "IF encoder")?;
        let (y, enc) = self.encoder.forward_cached(h, ctx);
        let mut y_relaxed = y.as_standard_layout().to_owned();
        if noise {
            add_uniform_noise(y_relaxed.as_slice_mut().unwrap(), rng);
        }
        let (f, dec) = self.decoder.forward_cached(&y_relaxed, ctx);
        Ok((IfTrainOutput { f, y_relaxed }, IfCache { enc, dec }))
    }

    /// Entropy term over the relaxed latent. Returns the bits and their
    /// gradient with respect to the latent scaled by `latent_scale`; the
    /// entropy model's own parameters accumulate `param_scale * dbits`.
    pub fn entropy_bits_and_grad(
        &mut self,
        y_relaxed: &Array4<f64>,
        latent_scale: f64,
        param_scale: f64,
    ) -> Result<(f64, Array4<f64>)> {
        let (bits, dy) = self.entropy.bits_and_grad(y_relaxed, latent_scale, param_scale);
        if !bits.is_finite() {
            return Err(Error::Numerical("non-finite latent likelihood".into()));
        }
        Ok((bits, dy))
    }

    /// Backward through decoder then encoder. `dy_extra` is added to the
    /// latent gradient (the entropy term).
    pub fn backward(&mut self, cache: IfCache, df: &Array4<f64>, dy_extra: Option<&Array4<f64>>) -> Array4<f64> {
        let mut dy = self.decoder.backward(cache.dec, df);
        if let Some(e) = dy_extra {
            dy += e;
        }
        self.encoder.backward(cache.enc, &dy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(rng: &mut ChaCha8Rng) -> IfModule {
        let cfg = IfConfig {
            hidden: 6,
            latent: 5,
            res_blocks: 1,
            ..Default::default()
        };
        IfModule::new(4, &cfg, rng)
    }

    #[test]
    fn shapes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = toy(&mut rng);
        for (s, q) in [(16, 2), (32, 4)] {
            let h = Array4::from_elem((1, 4, s, s), 0.2);
            let y = m.encode(&h).unwrap();
            assert_eq!(y.dim(), (1, 5, q, q));
            let f = m.decode(&y).unwrap();
            assert_eq!(f.dim(), h.dim());
            assert_eq!(f, m.features(&h).unwrap());
        }
        assert!(m.encode(&Array4::zeros((1, 4, 12, 16))).is_err());
        assert!(m.decode(&Array4::zeros((1, 4, 2, 2))).is_err());
    }

    #[test]
    fn relax_is_bounded_and_seeded() {
        let y = Array4::from_shape_fn((2, 3, 4, 4), |(a, b, c, d)| (a + b * c) as f64 - d as f64 * 0.3);
        let r = relax(&y, 7);
        assert!((&r.values - &y).iter().all(|d| d.abs() <= 0.5));
        assert_eq!(r, relax(&y, 7));
        assert_ne!(r.values, relax(&y, 8).values);
    }

    #[test]
    fn entropy_bits_match_likelihood_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = toy(&mut rng);
        let y = Array4::from_shape_fn((2, 5, 2, 2), |_| rng.random_range(-4.0..4.0));
        let p = m.entropy.likelihoods(&y);
        let bits = crate::entropy_models::rate_bits(p.as_slice().unwrap()).unwrap();
        assert!((bits - m.entropy_bits(&y).unwrap()).abs() < 1e-9);
        assert!(p.iter().all(|v| (crate::entropy_models::LIKELIHOOD_FLOOR..=1.0).contains(v)));
    }
}
