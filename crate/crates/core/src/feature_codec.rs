//! Learned feature compressor: analysis/synthesis transforms, a hyperprior
//! that predicts a Gaussian mixture per latent element, the stage-2
//! objective, and the compressed bitstream.

use ndarray::{Array4, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneTail;
use crate::coder::{EntropyCoder, SymbolPlan};
use crate::entropy_models::gaussian::{gmm_mass, gmm_mass_grad, gmm_support_pmf};
use crate::entropy_models::quantize::{add_uniform_noise, round_half_away};
use crate::entropy_models::{CdfTable, FactorizedDensity, GmmParams, QuantMode, LIKELIHOOD_FLOOR, PRECISION, SCALE_FLOOR};
use crate::error::{Error, Result};
use crate::feature::{check_channels, check_divisible, FeatureMap};
use crate::nn::layers::{sigmoid, softplus};
use crate::nn::{Conv2d, ConvTranspose2d, Ctx, FrozenDigest, Layer, Module, ResBlock, Sequential};

/// Spatial reduction of the analysis transform.
pub const CODEC_DOWNSAMPLE: usize = 4;
/// Spatial reduction from features to the hyper-latent.
pub const HYPER_DOWNSAMPLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    /// Channels of the features being compressed.
    pub feature_channels: usize,
    pub hidden: usize,
    pub latent: usize,
    pub hyper: usize,
    pub res_blocks: usize,
    pub mixtures: usize,
    pub leaky_slope: f64,
    pub z_filters: Vec<usize>,
    pub z_init_scale: f64,
    /// Half-width of the default symbol support `[-support, support - 1]`.
    pub support: i32,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            feature_channels: 64,
            hidden: 128,
            latent: 128,
            hyper: 128,
            res_blocks: 3,
            mixtures: 3,
            leaky_slope: 0.01,
            z_filters: vec![3, 3, 3, 3],
            z_init_scale: 10.0,
            support: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FeatureCodec {
    pub analysis: Sequential,
    pub synthesis: Sequential,
    pub hyper_analysis: Sequential,
    pub hyper_synthesis: Sequential,
    pub z_model: FactorizedDensity,
    cfg: CodecConfig,
}

crate::impl_module!(FeatureCodec {
    analysis,
    synthesis,
    hyper_analysis,
    hyper_synthesis,
    z_model
});

fn res_stack<R: Rng + ?Sized>(ch: usize, n: usize, slope: f64, rng: &mut R) -> Vec<Layer> {
    (0..n).map(|_| Layer::Res(ResBlock::new(ch, slope, rng))).collect()
}

/// Mixture parameters for every latent element of a batch. Element
/// `(b, k, c, p)` lives at `((b * K + k) * M + c) * hw + p`.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub hw: usize,
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Mixture {
    /// Splits raw hyper-synthesis output `[n, 3*K*M, h, w]` laid out as
    /// `[weight logits | means | raw scales]`, each block component-major.
    fn from_raw(raw: &Array4<f64>, k: usize, m: usize) -> Self {
        let (n, ch, h, w) = raw.dim();
        assert_eq!(ch, 3 * k * m);
        let hw = h * w;
        let raw = raw.as_standard_layout();
        let r = raw.as_slice().unwrap();
        let len = n * k * m * hw;
        let (mut weights, mut means, mut scales) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
        let km = k * m;
        for b in 0..n {
            let base = b * 3 * km * hw;
            for c in 0..m {
                for p in 0..hw {
                    let at = |g: usize, kk: usize| base + (g * km + kk * m + c) * hw + p;
                    let top = (0..k).map(|kk| r[at(0, kk)]).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..k).map(|kk| (r[at(0, kk)] - top).exp()).sum();
                    for kk in 0..k {
                        let i = ((b * k + kk) * m + c) * hw + p;
                        weights[i] = (r[at(0, kk)] - top).exp() / z;
                        means[i] = r[at(1, kk)];
                        scales[i] = SCALE_FLOOR + softplus(r[at(2, kk)]);
                    }
                }
            }
        }
        Mixture {
            n,
            k,
            m,
            hw,
            weights,
            means,
            scales,
        }
    }

    #[inline]
    fn idx(&self, b: usize, kk: usize, c: usize, p: usize) -> usize {
        ((b * self.k + kk) * self.m + c) * self.hw + p
    }

    fn gather(&self, v: &[f64], b: usize, c: usize, p: usize) -> Vec<f64> {
        (0..self.k).map(|kk| v[self.idx(b, kk, c, p)]).collect()
    }

    pub fn params(&self, b: usize, c: usize, p: usize) -> GmmParams {
        GmmParams {
            weights: self.gather(&self.weights, b, c, p),
            means: self.gather(&self.means, b, c, p),
            scales: self.gather(&self.scales, b, c, p),
        }
    }

    /// Weighted mean of the components for every element, `[n, M, h, w]` order.
    pub fn centers(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.m * self.hw];
        for b in 0..self.n {
            for c in 0..self.m {
                for p in 0..self.hw {
                    out[(b * self.m + c) * self.hw + p] =
                        (0..self.k).map(|kk| self.weights[self.idx(b, kk, c, p)] * self.means[self.idx(b, kk, c, p)]).sum();
                }
            }
        }
        out
    }
}

/// Result of a full codec pass over a batch.
#[derive(Clone, Debug)]
pub struct CodecOutput {
    pub f_hat: Array4<f64>,
    /// Quantized (or relaxed) latent that produced `f_hat`'s rate.
    pub y_hat: Array4<f64>,
    pub z_hat: Array4<f64>,
    /// Estimated bits per latent element of `y_hat`.
    pub y_element_bits: Array4<f64>,
    /// Estimated bits per batch item.
    pub y_bits: Vec<f64>,
    pub z_bits: Vec<f64>,
}

impl CodecOutput {
    pub fn total_bits(&self) -> Vec<f64> {
        self.y_bits.iter().zip(&self.z_bits).map(|(a, b)| a + b).collect()
    }
}

fn per_item_bits(bits: &Array4<f64>) -> Vec<f64> {
    bits.outer_iter().map(|b| b.sum()).collect()
}

impl FeatureCodec {
    pub fn new<R: Rng + ?Sized>(cfg: &CodecConfig, rng: &mut R) -> Self {
        let (c, n, m, nz, s) = (cfg.feature_channels, cfg.hidden, cfg.latent, cfg.hyper, cfg.leaky_slope);
        let rb = cfg.res_blocks;

        let mut ana = vec![Layer::Conv(Conv2d::new(c, n, 3, 2, 1, true, rng)), Layer::LeakyRelu(s)];
        ana.extend(res_stack(n, rb, s, rng));
        ana.push(Layer::Conv(Conv2d::new(n, m, 3, 2, 1, true, rng)));

        let mut syn = vec![Layer::ConvT(ConvTranspose2d::new(m, n, 3, 2, 1, 1, true, rng)), Layer::LeakyRelu(s)];
        syn.extend(res_stack(n, rb, s, rng));
        syn.push(Layer::ConvT(ConvTranspose2d::new(n, c, 3, 2, 1, 1, true, rng)));

        let hana = vec![
            Layer::Conv(Conv2d::new(m, nz, 3, 2, 1, true, rng)),
            Layer::LeakyRelu(s),
            Layer::Conv(Conv2d::new(nz, nz, 3, 2, 1, true, rng)),
        ];
        let out = 3 * cfg.mixtures * m;
        let hsyn = vec![
            Layer::ConvT(ConvTranspose2d::new(nz, nz, 3, 2, 1, 1, true, rng)),
            Layer::LeakyRelu(s),
            Layer::ConvT(ConvTranspose2d::new(nz, out, 3, 2, 1, 1, true, rng)),
        ];

        FeatureCodec {
            analysis: Sequential::new(ana),
            synthesis: Sequential::new(syn),
            hyper_analysis: Sequential::new(hana),
            hyper_synthesis: Sequential::new(hsyn),
            z_model: FactorizedDensity::new(nz, &cfg.z_filters, cfg.z_init_scale, rng),
            cfg: cfg.clone(),
        }
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    /// Identifier written into bitstreams.
    pub fn model_id(&self) -> u64 {
        self.state_digest().0
    }

    fn check_input(&self, f: &Array4<f64>) -> Result<()> {
        check_channels(f, self.cfg.feature_channels, "feature codec")?;
        check_divisible(f, HYPER_DOWNSAMPLE, "feature codec")
    }

    fn mixture(&self, z_hat: &Array4<f64>) -> Mixture {
        Mixture::from_raw(&self.hyper_synthesis.forward(z_hat), self.cfg.mixtures, self.cfg.latent)
    }

    /// Full pass. `Round` reproduces exactly what compress/decompress do;
    /// `Noise` gives the training-time rate relaxation (the reconstruction
    /// still comes from the rounded latent).
    pub fn forward<R: Rng + ?Sized>(&self, f: &Array4<f64>, mode: QuantMode, rng: &mut R) -> Result<CodecOutput> {
        self.check_input(f)?;
        let y = self.analysis.forward(f);
        let z = self.hyper_analysis.forward(&y);
        let z_hat = match mode {
            QuantMode::Round => z.mapv(round_half_away),
            QuantMode::Noise => noisy(&z, rng),
        };
        let z_bits = per_item_bits(&self.z_model.likelihoods(&z_hat).mapv(|p| -p.log2()));
        let mix = self.mixture(&z_hat);
        let centers = mix.centers();
        let y_round = centered_round(&y, &centers);
        let y_rate_at = match mode {
            QuantMode::Round => y_round.clone(),
            QuantMode::Noise => noisy(&y, rng),
        };
        let y_element_bits = gmm_bits(&y_rate_at, &mix);
        let f_hat = self.synthesis.forward(&y_round);
        Ok(CodecOutput {
            f_hat,
            y_bits: per_item_bits(&y_element_bits),
            y_hat: y_rate_at,
            z_hat,
            y_element_bits,
            z_bits,
        })
    }

    /// Rounded reconstruction only.
    pub fn reconstruct(&self, f: &Array4<f64>) -> Result<Array4<f64>> {
        Ok(self.forward(f, QuantMode::Round, &mut rand::rng())?.f_hat)
    }
}

fn noisy<R: Rng + ?Sized>(x: &Array4<f64>, rng: &mut R) -> Array4<f64> {
    let mut out = x.as_standard_layout().to_owned();
    add_uniform_noise(out.as_slice_mut().unwrap(), rng);
    out
}

/// `round(y - mu) + mu` with `mu` in `[n, M, h, w]` order.
fn centered_round(y: &Array4<f64>, centers: &[f64]) -> Array4<f64> {
    let mut out = y.as_standard_layout().to_owned();
    for (v, &m) in out.as_slice_mut().unwrap().iter_mut().zip(centers) {
        *v = round_half_away(*v - m) + m;
    }
    out
}

/// Floored per-element code lengths of `y` under the mixture.
fn gmm_bits(y: &Array4<f64>, mix: &Mixture) -> Array4<f64> {
    let mut out = y.as_standard_layout().to_owned();
    let (n, m, h, w) = y.dim();
    let hw = h * w;
    let s = out.as_slice_mut().unwrap();
    for b in 0..n {
        for c in 0..m {
            for p in 0..hw {
                let i = (b * m + c) * hw + p;
                let g = mix.params(b, c, p);
                let mass = gmm_mass(s[i], &g.weights, &g.means, &g.scales);
                s[i] = -mass.max(LIKELIHOOD_FLOOR).log2();
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Stage-2 objective and training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    /// Weight of the feature-domain distortion.
    pub lambda: f64,
    /// Weights of the distortion measured after each tail stage.
    pub lambda_stages: [f64; 3],
    /// Common multiplier applied to all four distortion weights.
    pub lambda_coef: f64,
    pub lr: f64,
    pub iterations: usize,
    pub batch: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            lambda: 2048.0,
            lambda_stages: [512.0, 256.0, 125.0],
            lambda_coef: 1.0,
            lr: 5e-5,
            iterations: 400_000,
            batch: 32,
        }
    }
}

/// Components of the stage-2 objective for one batch (batch means).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Loss {
    pub step: usize,
    /// Rate plus all distortion terms.
    pub total: f64,
    /// Rate plus feature-domain distortion.
    pub rd: f64,
    /// Weighted distortion after the tail stages.
    pub stage_term: f64,
    /// Bits per feature element.
    pub rate: f64,
    /// Spatially normalized squared error between features and reconstruction.
    pub mse: f64,
    pub bits_per_item: f64,
}

/// Stage-2 objective evaluated on given reconstructions, without gradients.
/// `bits` holds the estimated rate of each batch item.
pub fn stage2_loss(
    f: &Array4<f64>,
    f_hat: &Array4<f64>,
    bits: &[f64],
    tail: &BackboneTail,
    frozen_tail: &FrozenDigest,
    cfg: &Stage2Config,
) -> Result<Stage2Loss> {
    frozen_tail.verify(tail)?;
    if f.dim() != f_hat.dim() || bits.len() != f.dim().0 {
        return Err(Error::Shape(format!("features {:?}, reconstruction {:?}, {} rates", f.dim(), f_hat.dim(), bits.len())));
    }
    let (n, c, h, w) = f.dim();
    let rate = bits.iter().sum::<f64>() / (n * c * h * w) as f64;
    let mse = spatial_sq(f, f_hat) / (n * h * w) as f64;
    let a = tail.forward(f)?;
    let b = tail.forward(f_hat)?;
    let mut stage_term = 0.0;
    for (i, (sa, sb)) in a.stage_feats.iter().zip(&b.stage_feats).enumerate() {
        let (_, _, hi, wi) = sa.dim();
        stage_term += cfg.lambda_coef * cfg.lambda_stages[i] * spatial_sq(sa, sb) / (n * hi * wi) as f64;
    }
    let rd = rate + cfg.lambda_coef * cfg.lambda * mse;
    Ok(Stage2Loss {
        step: 0,
        total: rd + stage_term,
        rd,
        stage_term,
        rate,
        mse,
        bits_per_item: bits.iter().sum::<f64>() / n as f64,
    })
}

fn spatial_sq(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y))
}

/// Gradient-carrying stage-2 trainer over precomputed features. Only the
/// codec is optimized; the tail is checked against its registered digest
/// at every step.
pub struct Stage2Trainer {
    pub codec: FeatureCodec,
    pub tail: BackboneTail,
    pub cfg: Stage2Config,
    frozen_tail: FrozenDigest,
    opt: crate::nn::Adam,
    step: usize,
}

impl Stage2Trainer {
    pub fn new(codec: FeatureCodec, mut tail: BackboneTail, cfg: Stage2Config) -> Result<Self> {
        if codec.config().feature_channels != tail.in_channels() {
            return Err(Error::Config(format!(
                "codec expects {} feature channels, tail takes {}",
                codec.config().feature_channels,
                tail.in_channels()
            )));
        }
        if !(cfg.lambda_coef > 0.0) {
            return Err(Error::Config(format!("lambda_coef must be positive, got {}", cfg.lambda_coef)));
        }
        tail.set_trainable(false);
        let frozen_tail = FrozenDigest::register("backbone tail", &tail);
        let opt = crate::nn::Adam::new(cfg.lr);
        Ok(Stage2Trainer {
            codec,
            tail,
            cfg,
            frozen_tail,
            opt,
            step: 0,
        })
    }

    pub fn frozen_tail(&self) -> &FrozenDigest {
        &self.frozen_tail
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One optimizer step on a feature batch `[n, C, H, W]`.
    pub fn step<R: Rng + ?Sized>(&mut self, f: &Array4<f64>, rng: &mut R) -> Result<Stage2Loss> {
        self.frozen_tail.verify(&self.tail)?;
        self.codec.check_input(f)?;
        let cfg = self.cfg.clone();
        let codec = &mut self.codec;
        let (k, m) = (codec.cfg.mixtures, codec.cfg.latent);
        let (n, c, h, w) = f.dim();
        let rate_scale = 1.0 / (n * c * h * w) as f64;
        codec.zero_grad();
        let ctx = Ctx::EVAL;

        let (y, ac) = codec.analysis.forward_cached(f, ctx);
        let (z, hac) = codec.hyper_analysis.forward_cached(&y, ctx);
        let z_tilde = noisy(&z, rng);
        let (z_bits, dz_rate) = codec.z_model.bits_and_grad(&z_tilde, rate_scale, rate_scale);
        let (raw, hsc) = codec.hyper_synthesis.forward_cached(&z_tilde, ctx);
        let mix = Mixture::from_raw(&raw, k, m);

        // rate of the noise-relaxed latent and its partials
        let y_tilde = noisy(&y, rng);
        let (y_bits, dy_rate, dmix) = gmm_bits_and_grad(&y_tilde, &mix, rate_scale);
        let d_raw = mixture_backward(&raw, &mix, &dmix);

        // reconstruction from the rounded latent, straight-through
        let y_round = centered_round(&y, &mix.centers());
        let (f_hat, sc) = codec.synthesis.forward_cached(&y_round, ctx);

        let coef = cfg.lambda_coef;
        let mse = spatial_sq(f, &f_hat) / (n * h * w) as f64;
        let mut df_hat = (&f_hat - f) * (2.0 * coef * cfg.lambda / (n * h * w) as f64);
        let target = self.tail.forward(f)?;
        let (out, tc) = self.tail.forward_cached(&f_hat, ctx)?;
        let mut stage_term = 0.0;
        let mut d_stages = Vec::with_capacity(3);
        for (i, (sa, sb)) in target.stage_feats.iter().zip(&out.stage_feats).enumerate() {
            let (_, _, hi, wi) = sa.dim();
            let wgt = coef * cfg.lambda_stages[i] / (n * hi * wi) as f64;
            stage_term += wgt * spatial_sq(sa, sb);
            d_stages.push(Some((sb - sa) * (2.0 * wgt)));
        }
        df_hat += &self.tail.backward(tc, d_stages, None);

        let mut dy = codec.synthesis.backward(sc, &df_hat);
        dy += &dy_rate;
        let mut dz = codec.hyper_synthesis.backward(hsc, &d_raw);
        dz += &dz_rate;
        dy += &codec.hyper_analysis.backward(hac, &dz);
        codec.analysis.backward(ac, &dy);
        crate::nn::Optimizer::step(&mut self.opt, codec, "codec");
        self.step += 1;

        let bits = y_bits + z_bits;
        let rate = bits * rate_scale;
        let rd = rate + coef * cfg.lambda * mse;
        let loss = Stage2Loss {
            step: self.step,
            total: rd + stage_term,
            rd,
            stage_term,
            rate,
            mse,
            bits_per_item: bits / n as f64,
        };
        if !loss.total.is_finite() {
            return Err(Error::Numerical(format!("stage-2 loss became {} at step {}", loss.total, self.step)));
        }
        Ok(loss)
    }
}

/// Runs `cfg.iterations` steps over random batches of `features`
/// (`[C, H, W]` maps of one shape), writing one JSON line per `log_every`
/// steps to `log` when given. Returns the logged records.
pub fn train_stage2(
    trainer: &mut Stage2Trainer,
    features: &[FeatureMap],
    seed: u64,
    log_every: usize,
    mut log: Option<&mut dyn std::io::Write>,
) -> Result<Vec<Stage2Loss>> {
    use rand::SeedableRng;
    if features.is_empty() {
        return Err(Error::InvalidArgument("no training features".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let batch = trainer.cfg.batch.max(1);
    let mut records = Vec::new();
    let every = log_every.max(1);
    for _ in 0..trainer.cfg.iterations {
        let pick: Vec<FeatureMap> = (0..batch)
            .map(|_| {
                let f = &features[rng.random_range(0..features.len())];
                FeatureMap::new(crate::data::pad_edge(&f.data, HYPER_DOWNSAMPLE), f.downsample)
            })
            .collect();
        let x = FeatureMap::stack(&pick)?;
        let rec = trainer.step(&x, &mut rng)?;
        if rec.step % every == 0 {
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&rec).expect("loss record serializes");
                writeln!(w, "{line}").map_err(|e| Error::io("<stage-2 log>", e))?;
            }
            records.push(rec);
        }
    }
    Ok(records)
}

/// Partials of the rate with respect to the mixture parameters, laid out
/// like [`Mixture`].
struct MixtureGrad {
    dw: Vec<f64>,
    dmu: Vec<f64>,
    dsigma: Vec<f64>,
}

/// Total floored bits of `y` and their gradients (scaled by `scale`) with
/// respect to `y` and the mixture parameters.
fn gmm_bits_and_grad(y: &Array4<f64>, mix: &Mixture, scale: f64) -> (f64, Array4<f64>, MixtureGrad) {
    let (n, m, h, w) = y.dim();
    let hw = h * w;
    let y = y.as_standard_layout();
    let ys = y.as_slice().unwrap();
    let mut dy = vec![0.0; ys.len()];
    let len = mix.weights.len();
    let mut g = MixtureGrad {
        dw: vec![0.0; len],
        dmu: vec![0.0; len],
        dsigma: vec![0.0; len],
    };
    let k = mix.k;
    let (mut dw, mut dmu, mut ds) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    let mut total = 0.0;
    for b in 0..n {
        for c in 0..m {
            for p in 0..hw {
                let i = (b * m + c) * hw + p;
                let gp = mix.params(b, c, p);
                let (mass, dp_dy) = gmm_mass_grad(ys[i], &gp.weights, &gp.means, &gp.scales, &mut dw, &mut dmu, &mut ds);
                if mass > LIKELIHOOD_FLOOR {
                    total += -mass.log2();
                    let coef = -scale / (mass * std::f64::consts::LN_2);
                    dy[i] = coef * dp_dy;
                    for kk in 0..k {
                        let j = mix.idx(b, kk, c, p);
                        g.dw[j] = coef * dw[kk];
                        g.dmu[j] = coef * dmu[kk];
                        g.dsigma[j] = coef * ds[kk];
                    }
                } else {
                    total += -LIKELIHOOD_FLOOR.log2();
                }
            }
        }
    }
    (total, Array4::from_shape_vec((n, m, h, w), dy).unwrap(), g)
}

/// Backpropagates mixture partials to the raw hyper-synthesis output.
fn mixture_backward(raw: &Array4<f64>, mix: &Mixture, g: &MixtureGrad) -> Array4<f64> {
    let raw = raw.as_standard_layout();
    let r = raw.as_slice().unwrap();
    let mut d = vec![0.0; r.len()];
    let (k, m, hw) = (mix.k, mix.m, mix.hw);
    let km = k * m;
    for b in 0..mix.n {
        let base = b * 3 * km * hw;
        for c in 0..m {
            for p in 0..hw {
                let at = |grp: usize, kk: usize| base + (grp * km + kk * m + c) * hw + p;
                let mean_g: f64 = (0..k).map(|kk| mix.weights[mix.idx(b, kk, c, p)] * g.dw[mix.idx(b, kk, c, p)]).sum();
                for kk in 0..k {
                    let j = mix.idx(b, kk, c, p);
                    d[at(0, kk)] = mix.weights[j] * (g.dw[j] - mean_g);
                    d[at(1, kk)] = g.dmu[j];
                    d[at(2, kk)] = g.dsigma[j] * sigmoid(r[at(2, kk)]);
                }
            }
        }
    }
    Array4::from_shape_vec(raw.raw_dim(), d).unwrap()
}

// ---------------------------------------------------------------------------
// Bitstream

pub const MAGIC: &[u8; 4] = b"OICM";
pub const VERSION: u8 = 1;
/// Fixed header: magic, version, model id, image dims, feature dims, two
/// payload lengths and two payload checksums.
pub const HEADER_LEN: usize = 4 + 1 + 8 + 8 + 6 + 4 + 4 + 4 + 4;
/// Largest support widening step recorded in a stream.
const MAX_WIDEN: u8 = 15;

/// A compressed feature map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub model_id: u64,
    /// Original image height and width, before any padding.
    pub image_dims: (u32, u32),
    /// Channels, height and width of the coded feature map.
    pub feature_dims: (u16, u16, u16),
    pub z_payload: Vec<u8>,
    pub y_payload: Vec<u8>,
}

impl Bitstream {
    pub fn len(&self) -> usize {
        HEADER_LEN + self.z_payload.len() + self.y_payload.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Payload size in bytes, excluding the header.
    pub fn payload_len(&self) -> usize {
        self.z_payload.len() + self.y_payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.model_id.to_le_bytes());
        out.extend_from_slice(&self.image_dims.0.to_le_bytes());
        out.extend_from_slice(&self.image_dims.1.to_le_bytes());
        out.extend_from_slice(&self.feature_dims.0.to_le_bytes());
        out.extend_from_slice(&self.feature_dims.1.to_le_bytes());
        out.extend_from_slice(&self.feature_dims.2.to_le_bytes());
        out.extend_from_slice(&(self.z_payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.y_payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&self.z_payload).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&self.y_payload).to_le_bytes());
        out.extend_from_slice(&self.z_payload);
        out.extend_from_slice(&self.y_payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Bitstream(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Bitstream("bad magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Bitstream(format!("unsupported version {}", bytes[4])));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let model_id = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
        let image_dims = (u32_at(13), u32_at(17));
        let feature_dims = (u16_at(21), u16_at(23), u16_at(25));
        let z_len = u32_at(27) as usize;
        let y_len = u32_at(31) as usize;
        let (z_crc, y_crc) = (u32_at(35), u32_at(39));
        let expected = HEADER_LEN + z_len + y_len;
        if bytes.len() < expected {
            return Err(Error::Truncated);
        }
        if bytes.len() > expected {
            return Err(Error::Bitstream(format!("{} trailing bytes", bytes.len() - expected)));
        }
        let z_payload = bytes[HEADER_LEN..HEADER_LEN + z_len].to_vec();
        let y_payload = bytes[HEADER_LEN + z_len..].to_vec();
        if crc32fast::hash(&z_payload) != z_crc {
            return Err(Error::Checksum("z"));
        }
        if crc32fast::hash(&y_payload) != y_crc {
            return Err(Error::Checksum("y"));
        }
        Ok(Bitstream {
            model_id,
            image_dims,
            feature_dims,
            z_payload,
            y_payload,
        })
    }

    /// Payload bits per pixel of the original image; the fixed header is
    /// not counted.
    pub fn bpp(&self) -> f64 {
        crate::evalkit::bpp(self.payload_len(), self.image_dims.0 as usize, self.image_dims.1 as usize)
    }
}

/// Smallest widening step whose support `[-(s << k), (s << k) - 1]` holds all symbols.
fn widening_for(symbols: &[i32], support: i32) -> Result<u8> {
    let (lo, hi) = symbols.iter().fold((0, 0), |(a, b), &s| (a.min(s), b.max(s)));
    for k in 0..=MAX_WIDEN {
        let half = (support as i64) << k;
        if (lo as i64) >= -half && (hi as i64) < half {
            if k > 0 {
                log::warn!("latent symbols span [{lo}, {hi}]; support widened {k} step(s)");
            }
            return Ok(k);
        }
    }
    Err(Error::InvalidArgument(format!("latent symbols span [{lo}, {hi}], beyond any supported widening")))
}

/// Table for the two widening steps; zero is by far the likeliest.
fn widen_table() -> Result<CdfTable> {
    let mut pmf = vec![1e-9; MAX_WIDEN as usize + 1];
    pmf[0] = 1.0;
    CdfTable::from_pmf(0, &pmf, 16)
}

fn support_range(support: i32, widen: u8) -> Result<(i32, i32)> {
    if widen > MAX_WIDEN {
        return Err(Error::Bitstream(format!("support widening {widen} out of range")));
    }
    let half = support.checked_shl(widen as u32).filter(|h| *h > 0).ok_or_else(|| Error::Bitstream("support overflow".into()))?;
    Ok((-half, half - 1))
}

impl FeatureCodec {
    fn z_tables(&self, lo: i32, hi: i32) -> Result<Vec<CdfTable>> {
        (0..self.z_model.channels())
            .map(|c| CdfTable::from_pmf(lo, &self.z_model.support_pmf(c, lo, hi), PRECISION))
            .collect()
    }

    /// Per-element tables for `y`, all with the same support.
    fn y_tables(&self, mix: &Mixture, centers: &[f64], lo: i32, hi: i32) -> Result<Vec<CdfTable>> {
        let mut tables = Vec::with_capacity(centers.len());
        for c in 0..mix.m {
            for p in 0..mix.hw {
                let g = mix.params(0, c, p);
                let pmf = gmm_support_pmf(&g, centers[c * mix.hw + p], lo, hi);
                tables.push(CdfTable::from_pmf(lo, &pmf, PRECISION)?);
            }
        }
        Ok(tables)
    }

    /// Codes one feature map `[C, H, W]` taken from an image of `image_dims`.
    pub fn compress(&self, f: &FeatureMap, image_dims: (usize, usize), coder: &dyn EntropyCoder) -> Result<Bitstream> {
        let (c, h, w) = f.dims();
        // the header keeps the true size; the codec sees an edge-padded map
        let x = FeatureMap::new(crate::data::pad_edge(&f.data, HYPER_DOWNSAMPLE), f.downsample).to_batch();
        self.check_input(&x)?;
        let dims16 = |v: usize| u16::try_from(v).map_err(|_| Error::InvalidArgument(format!("feature dim {v} exceeds 65535")));
        let dims32 = |v: usize| u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("image dim {v} exceeds u32")));
        let y = self.analysis.forward(&x);
        let z = self.hyper_analysis.forward(&y);
        let z_sym: Vec<i32> = z.iter().map(|&v| round_half_away(v) as i32).collect();
        let z_hat = z.mapv(round_half_away);
        let mix = self.mixture(&z_hat);
        let centers = mix.centers();
        let y_std = y.as_standard_layout();
        let y_sym: Vec<i32> = y_std
            .as_slice()
            .unwrap()
            .iter()
            .zip(&centers)
            .map(|(&v, &m)| round_half_away(v - m) as i32)
            .collect();

        let support = self.cfg.support;
        let zw = widening_for(&z_sym, support)?;
        let yw = widening_for(&y_sym, support)?;
        let (zlo, zhi) = support_range(support, zw)?;
        let (ylo, yhi) = support_range(support, yw)?;

        let mut z_tables = self.z_tables(zlo, zhi)?;
        let flag = z_tables.len() as u32;
        z_tables.push(widen_table()?);
        let (_, _, zh, zwid) = z.dim();
        let mut plan = SymbolPlan::new(vec![zw as i32, yw as i32], vec![flag, flag])?;
        for (i, s) in z_sym.into_iter().enumerate() {
            plan.push(s, (i / (zh * zwid)) as u32);
        }
        let z_payload = coder.encode(&plan, &z_tables)?;

        let y_tables = self.y_tables(&mix, &centers, ylo, yhi)?;
        let y_idx: Vec<u32> = (0..y_sym.len() as u32).collect();
        let y_payload = coder.encode(&SymbolPlan::new(y_sym, y_idx)?, &y_tables)?;

        Ok(Bitstream {
            model_id: self.model_id(),
            image_dims: (dims32(image_dims.0)?, dims32(image_dims.1)?),
            feature_dims: (dims16(c)?, dims16(h)?, dims16(w)?),
            z_payload,
            y_payload,
        })
    }

    /// Recovers the rounded reconstruction from a stream made by [`Self::compress`].
    pub fn decompress(&self, stream: &Bitstream, coder: &dyn EntropyCoder) -> Result<FeatureMap> {
        let ours = self.model_id();
        if stream.model_id != ours {
            return Err(Error::ModelMismatch {
                stream: stream.model_id,
                params: ours,
            });
        }
        let (c, h, w) = (
            stream.feature_dims.0 as usize,
            stream.feature_dims.1 as usize,
            stream.feature_dims.2 as usize,
        );
        if c != self.cfg.feature_channels || h == 0 || w == 0 {
            return Err(Error::Bitstream(format!("feature dims {c}x{h}x{w} do not fit this codec")));
        }
        let (true_h, true_w) = (h, w);
        let (h, w) = (h.div_ceil(HYPER_DOWNSAMPLE) * HYPER_DOWNSAMPLE, w.div_ceil(HYPER_DOWNSAMPLE) * HYPER_DOWNSAMPLE);
        // the widening symbols lead the z stream and decode without the other tables
        let widen = widen_table()?;
        let flags = coder.decode(&stream.z_payload, &[0, 0], std::slice::from_ref(&widen))?;
        let (zlo, zhi) = support_range(self.cfg.support, flags[0] as u8)?;
        let (ylo, yhi) = support_range(self.cfg.support, flags[1] as u8)?;

        let (zh, zwid) = (h / HYPER_DOWNSAMPLE, w / HYPER_DOWNSAMPLE);
        let nz = self.z_model.channels();
        let mut z_tables = self.z_tables(zlo, zhi)?;
        let flag = z_tables.len() as u32;
        z_tables.push(widen);
        let z_idx: Vec<u32> = [flag, flag].into_iter().chain((0..nz * zh * zwid).map(|i| (i / (zh * zwid)) as u32)).collect();
        let z_sym = coder.decode(&stream.z_payload, &z_idx, &z_tables)?.split_off(2);
        let z_hat = Array4::from_shape_vec((1, nz, zh, zwid), z_sym.iter().map(|&s| s as f64).collect()).unwrap();

        let mix = self.mixture(&z_hat);
        let centers = mix.centers();
        let y_tables = self.y_tables(&mix, &centers, ylo, yhi)?;
        let y_idx: Vec<u32> = (0..y_tables.len() as u32).collect();
        let y_sym = coder.decode(&stream.y_payload, &y_idx, &y_tables)?;
        let (yh, yw) = (h / CODEC_DOWNSAMPLE, w / CODEC_DOWNSAMPLE);
        let y_hat = Array4::from_shape_vec(
            (1, self.cfg.latent, yh, yw),
            y_sym.iter().zip(&centers).map(|(&s, &m)| s as f64 + m).collect(),
        )
        .unwrap();
        let f_hat = self.synthesis.forward(&y_hat);
        let f_hat = f_hat.slice(ndarray::s![0, .., ..true_h, ..true_w]).to_owned();
        Ok(FeatureMap::new(f_hat, crate::backbone::HEAD_DOWNSAMPLE))
    }
}
