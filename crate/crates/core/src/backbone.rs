//! Reduced residual backbone split into head, tail and projection MLP.

use ndarray::{Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{check_channels, check_divisible, FeatureMap};
use crate::nn::layers::{global_avg_pool, global_avg_pool_backward, l2_normalize_rows, l2_normalize_rows_backward};
use crate::nn::{BasicBlock, BatchNorm2d, Conv2d, Ctx, Layer, Linear, SeqCache, Sequential};

/// Head output downsampling relative to the image.
pub const HEAD_DOWNSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Head output channels; the tail stages use 2x, 4x and 8x this width.
    pub width: usize,
    /// Basic blocks per stage (stage 1 lives in the head).
    pub blocks: [usize; 4],
    pub proj_hidden: usize,
    pub embed_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            width: 64,
            blocks: [1, 1, 1, 1],
            proj_hidden: 512,
            embed_dim: 128,
        }
    }
}

impl BackboneConfig {
    pub fn stage_widths(&self) -> [usize; 4] {
        let c = self.width;
        [c, 2 * c, 4 * c, 8 * c]
    }
}

fn stage<R: Rng + ?Sized>(inp: usize, out: usize, blocks: usize, stride: usize, rng: &mut R) -> Vec<Layer> {
    let mut v = vec![Layer::Basic(BasicBlock::new(inp, out, stride, rng))];
    for _ in 1..blocks {
        v.push(Layer::Basic(BasicBlock::new(out, out, 1, rng)));
    }
    v
}

/// Stem plus the first residual stage.
#[derive(Clone, Debug)]
pub struct BackboneHead {
    pub body: Sequential,
    out_channels: usize,
}

crate::impl_module!(BackboneHead { body });

impl BackboneHead {
    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let c = cfg.width;
        let mut layers = vec![
            Layer::Conv(Conv2d::new(3, c, 3, 2, 1, false, rng)),
            Layer::Bn(BatchNorm2d::new(c)),
            Layer::Relu,
            Layer::MaxPool2,
        ];
        layers.extend(stage(c, c, cfg.blocks[0], 1, rng));
        BackboneHead {
            body: Sequential::new(layers),
            out_channels: c,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn downsample_factor(&self) -> usize {
        HEAD_DOWNSAMPLE
    }

    fn check(&self, x: &Array4<f64>) -> Result<()> {
        check_channels(x, 3, "backbone head")?;
        check_divisible(x, 32, "backbone head")
    }

    /// Evaluation-mode forward over a batch `[n, 3, H, W]`.
    pub fn forward_batch(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        self.check(x)?;
        Ok(self.body.forward(x))
    }

    pub fn forward(&self, image: &FeatureMap) -> Result<FeatureMap> {
        let y = self.forward_batch(&image.to_batch())?;
        Ok(FeatureMap::from_batch(&y, HEAD_DOWNSAMPLE).remove(0))
    }

    pub fn forward_cached(&mut self, x: &Array4<f64>, ctx: Ctx) -> Result<(Array4<f64>, SeqCache)> {
        self.check(x)?;
        Ok(self.body.forward_cached(x, ctx))
    }

    pub fn backward(&mut self, cache: SeqCache, dy: &Array4<f64>) -> Array4<f64> {
        self.body.backward(cache, dy)
    }
}

/// Residual stages 2 to 4.
#[derive(Clone, Debug)]
pub struct BackboneTail {
    pub stages: Vec<Sequential>,
    in_channels: usize,
    out_channels: usize,
}

crate::impl_module!(BackboneTail { stages });

/// Per-stage outputs and the pooled final stage.
#[derive(Clone, Debug)]
pub struct TailOutput {
    pub stage_feats: Vec<Array4<f64>>,
    pub pooled: Array2<f64>,
}

#[derive(Debug)]
pub struct TailCache {
    stages: Vec<SeqCache>,
    last_hw: (usize, usize),
}

impl BackboneTail {
    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let w = cfg.stage_widths();
        let stages = (1..4)
            .map(|i| Sequential::new(stage(w[i - 1], w[i], cfg.blocks[i], 2, rng)))
            .collect();
        BackboneTail {
            stages,
            in_channels: w[0],
            out_channels: w[3],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        let c = self.in_channels;
        vec![2 * c, 4 * c, 8 * c]
    }

    pub fn forward(&self, f: &Array4<f64>) -> Result<TailOutput> {
        check_channels(f, self.in_channels, "backbone tail")?;
        let mut h = f.clone();
        let mut stage_feats = Vec::with_capacity(3);
        for s in &self.stages {
            h = s.forward(&h);
            stage_feats.push(h.clone());
        }
        let pooled = global_avg_pool(&h);
        Ok(TailOutput { stage_feats, pooled })
    }

    pub fn forward_cached(&mut self, f: &Array4<f64>, ctx: Ctx) -> Result<(TailOutput, TailCache)> {
        check_channels(f, self.in_channels, "backbone tail")?;
        let mut h = f.clone();
        let mut stage_feats = Vec::with_capacity(3);
        let mut caches = Vec::with_capacity(3);
        for s in &mut self.stages {
            let (y, c) = s.forward_cached(&h, ctx);
            caches.push(c);
            stage_feats.push(y.clone());
            h = y;
        }
        let (_, _, hh, ww) = h.dim();
        let pooled = global_avg_pool(&h);
        Ok((
            TailOutput { stage_feats, pooled },
            TailCache {
                stages: caches,
                last_hw: (hh, ww),
            },
        ))
    }

    /// Backpropagates gradients arriving at any stage output and/or the
    /// pooled vector; returns the gradient with respect to the input.
    pub fn backward(
        &mut self,
        cache: TailCache,
        mut d_stages: Vec<Option<Array4<f64>>>,
        d_pooled: Option<&Array2<f64>>,
    ) -> Array4<f64> {
        d_stages.resize(self.stages.len(), None);
        let mut g: Option<Array4<f64>> = d_pooled.map(|d| global_avg_pool_backward(d, cache.last_hw.0, cache.last_hw.1));
        for (i, (s, c)) in self.stages.iter_mut().zip(cache.stages).enumerate().rev() {
            let gi = match (g.take(), d_stages[i].take()) {
                (Some(a), Some(b)) => a + b,
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => panic!("tail backward without upstream gradient at stage {i}"),
            };
            g = Some(s.backward(c, &gi));
        }
        g.expect("tail has stages")
    }
}

/// Linear-ReLU-Linear followed by L2 normalization.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

crate::impl_module!(ProjectionHead { fc1, fc2 });

#[derive(Debug)]
pub struct ProjCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
    out: Array2<f64>,
    norms: ndarray::Array1<f64>,
}

impl ProjectionHead {
    pub fn new<R: Rng + ?Sized>(inp: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        ProjectionHead {
            fc1: Linear::new(inp, hidden, rng),
            fc2: Linear::new(hidden, out, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_features()
    }

    fn check(&self, x: &Array2<f64>) -> Result<()> {
        if x.dim().1 != self.fc1.in_features() {
            return Err(Error::Shape(format!(
                "projection expects {} inputs, got {}",
                self.fc1.in_features(),
                x.dim().1
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        let h = self.fc1.forward(x).mapv(|v| v.max(0.0));
        Ok(l2_normalize_rows(&self.fc2.forward(&h)).0)
    }

    pub fn forward_cached(&mut self, x: &Array2<f64>) -> Result<(Array2<f64>, ProjCache)> {
        self.check(x)?;
        let pre = self.fc1.forward(x);
        let hidden = pre.mapv(|v| v.max(0.0));
        let (out, norms) = l2_normalize_rows(&self.fc2.forward(&hidden));
        Ok((
            out.clone(),
            ProjCache {
                x: x.clone(),
                pre,
                hidden,
                out,
                norms,
            },
        ))
    }

    pub fn backward(&mut self, cache: ProjCache, dy: &Array2<f64>) -> Array2<f64> {
        let d2 = l2_normalize_rows_backward(&cache.out, &cache.norms, dy);
        let dh = self.fc2.backward(&cache.hidden, &d2);
        let dpre = ndarray::Zip::from(&dh)
            .and(&cache.pre)
            .map_collect(|&g, &p| if p > 0.0 { g } else { 0.0 });
        self.fc1.backward(&cache.x, &dpre)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Module;
    use ndarray::{Array1, Array3, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> BackboneConfig {
        BackboneConfig {
            width: 4,
            blocks: [1, 1, 1, 1],
            proj_hidden: 8,
            embed_dim: 6,
        }
    }

    #[test]
    fn shape_ladder() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = BackboneHead::new(&cfg(), &mut rng);
        let tail = BackboneTail::new(&cfg(), &mut rng);
        for (s, q) in [(64, 16), (96, 24)] {
            let img = FeatureMap::new(Array3::from_elem((3, s, s), 0.3), 1);
            let f = head.forward(&img).unwrap();
            assert_eq!(f.dims(), (4, q, q));
            assert_eq!(f.downsample, 4);
        }
        let f = Array4::from_elem((1, 4, 16, 16), 0.1);
        let out = tail.forward(&f).unwrap();
        let dims: Vec<_> = out.stage_feats.iter().map(|a| (a.dim().2, a.dim().3)).collect();
        assert_eq!(dims, vec![(8, 8), (4, 4), (2, 2)]);
        assert_eq!(out.pooled.dim().1, tail.out_channels());
        assert!(head.forward_batch(&Array4::zeros((1, 1, 32, 32))).is_err());
        assert!(head.forward_batch(&Array4::zeros((1, 3, 48, 32))).is_err());
        assert!(tail.forward(&Array4::zeros((1, 5, 16, 16))).is_err());
    }

    #[test]
    fn batched_equals_individual() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = BackboneHead::new(&cfg(), &mut rng);
        let x = Array4::from_shape_fn((2, 3, 32, 32), |_| rng.random_range(-1.0..1.0));
        let both = head.forward_batch(&x).unwrap();
        for i in 0..2 {
            let one = head
                .forward_batch(&x.slice(ndarray::s![i..i + 1, .., .., ..]).to_owned())
                .unwrap();
            assert_eq!(one.slice(ndarray::s![0, .., .., ..]), both.slice(ndarray::s![i, .., .., ..]));
        }
    }

    #[test]
    fn projection_is_unit_norm_and_hand_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let proj = ProjectionHead::new(16, 8, 6, &mut rng);
        let x = Array2::from_shape_fn((5, 16), |_| rng.random_range(-1.0..1.0));
        let y = proj.forward(&x).unwrap();
        for r in y.outer_iter() {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-5);
        }
        assert_eq!(y, proj.forward(&x).unwrap());

        let mut id = ProjectionHead::new(4, 4, 4, &mut rng);
        let eye = ndarray::Array2::<f64>::eye(4).into_dyn();
        id.fc1.weight.value = eye.clone();
        id.fc2.weight.value = eye;
        id.fc1.bias.value = ndarray::ArrayD::zeros(IxDyn(&[4]));
        id.fc2.bias.value = ndarray::ArrayD::zeros(IxDyn(&[4]));
        let v = Array2::from_shape_vec((1, 4), vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        let out = id.forward(&v).unwrap();
        let expect = Array1::from(vec![0.2, 0.4, 0.4, 0.8]);
        for (a, b) in out.row(0).iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn tail_and_projection_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tail = BackboneTail::new(&cfg(), &mut rng);
        let mut proj = ProjectionHead::new(32, 8, 6, &mut rng);
        let f = Array4::from_shape_fn((2, 4, 8, 8), |_| rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_fn((2, 6), |_| rng.random_range(-1.0..1.0));
        let ctx = Ctx::train(1);
        let loss = |t: &BackboneTail, p: &ProjectionHead, x: &Array4<f64>| {
            let mut t = t.clone();
            let mut p = p.clone();
            let (o, _) = t.forward_cached(x, ctx).unwrap();
            (&p.forward_cached(&o.pooled).unwrap().0 * &w).sum()
        };
        let (t0, p0) = (tail.clone(), proj.clone());
        let (o, tc) = tail.forward_cached(&f, ctx).unwrap();
        let (_, pc) = proj.forward_cached(&o.pooled).unwrap();
        let dp = proj.backward(pc, &w);
        let df = tail.backward(tc, vec![], Some(&dp));
        let eps = 1e-6;
        let mut max_err: f64 = 0.0;
        for idx in [(0, 0, 0, 0), (1, 3, 7, 2), (0, 2, 4, 5)] {
            let mut a = f.clone();
            a[idx] += eps;
            let mut b = f.clone();
            b[idx] -= eps;
            let num = (loss(&t0, &p0, &a) - loss(&t0, &p0, &b)) / (2.0 * eps);
            max_err = max_err.max((num - df[idx]).abs() / (num.abs() + 1e-8));
        }
        assert!(max_err < 1e-4, "{max_err}");
        assert!(tail.num_weights() > 0);
    }
}
