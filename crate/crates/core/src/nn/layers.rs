use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;

use super::conv::{ConvCache, ConvTCache, Conv2d, ConvTranspose2d};
use super::param::{join, Module, Param};

/// Forward-pass context.
#[derive(Clone, Copy, Debug)]
pub struct Ctx {
    pub train: bool,
    /// Batch-norm statistics are computed independently over this many
    /// contiguous slices of the batch (virtual devices).
    pub bn_groups: usize,
}

impl Ctx {
    pub const EVAL: Ctx = Ctx {
        train: false,
        bn_groups: 1,
    };

    pub fn train(bn_groups: usize) -> Self {
        Ctx {
            train: true,
            bn_groups: bn_groups.max(1),
        }
    }
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    channels: usize,
}

#[derive(Debug)]
pub struct BnCache {
    xhat: Vec<f64>,
    /// `inv_std[g * c + ch]`
    inv_std: Vec<f64>,
    groups: Vec<(usize, usize)>,
    dims: (usize, usize, usize, usize),
    train: bool,
}

fn group_bounds(n: usize, groups: usize) -> Vec<(usize, usize)> {
    let g = groups.clamp(1, n.max(1));
    (0..g).map(|i| (i * n / g, (i + 1) * n / g)).collect()
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
            running_mean: Param::buffer(ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Param::buffer(ArrayD::ones(IxDyn(&[channels]))),
            channels,
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let hw = h * w;
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let mut out = vec![0.0; xs.len()];
        for ch in 0..c {
            let inv = 1.0 / (self.running_var.value[[ch]] + BN_EPS).sqrt();
            let (m, g, b) = (
                self.running_mean.value[[ch]],
                self.gamma.value[[ch]],
                self.beta.value[[ch]],
            );
            for ni in 0..n {
                let o = (ni * c + ch) * hw;
                for i in o..o + hw {
                    out[i] = g * (xs[i] - m) * inv + b;
                }
            }
        }
        Array4::from_shape_vec((n, c, h, w), out).unwrap()
    }

    pub fn forward_cached(&mut self, x: &Array4<f64>, ctx: Ctx) -> (Array4<f64>, BnCache) {
        if !ctx.train {
            let y = self.forward(x);
            let c = self.channels;
            let inv_std = (0..c)
                .map(|ch| 1.0 / (self.running_var.value[[ch]] + BN_EPS).sqrt())
                .collect();
            let cache = BnCache {
                xhat: Vec::new(),
                inv_std,
                groups: vec![(0, x.dim().0)],
                dims: x.dim(),
                train: false,
            };
            return (y, cache);
        }
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let hw = h * w;
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let groups = group_bounds(n, ctx.bn_groups);
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; groups.len() * c];
        let mut mean_acc = vec![0.0; c];
        let mut var_acc = vec![0.0; c];
        for (gi, &(s, e)) in groups.iter().enumerate() {
            let m = ((e - s) * hw) as f64;
            for ch in 0..c {
                let mut sum = 0.0;
                for ni in s..e {
                    let o = (ni * c + ch) * hw;
                    sum += xs[o..o + hw].iter().sum::<f64>();
                }
                let mean = sum / m;
                let mut sq = 0.0;
                for ni in s..e {
                    let o = (ni * c + ch) * hw;
                    sq += xs[o..o + hw].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                }
                let var = sq / m;
                let inv = 1.0 / (var + BN_EPS).sqrt();
                inv_std[gi * c + ch] = inv;
                let (g, b) = (self.gamma.value[[ch]], self.beta.value[[ch]]);
                for ni in s..e {
                    let o = (ni * c + ch) * hw;
                    for i in o..o + hw {
                        let xh = (xs[i] - mean) * inv;
                        xhat[i] = xh;
                        out[i] = g * xh + b;
                    }
                }
                mean_acc[ch] += mean / groups.len() as f64;
                let unbiased = if m > 1.0 { sq / (m - 1.0) } else { var };
                var_acc[ch] += unbiased / groups.len() as f64;
            }
        }
        for ch in 0..c {
            let rm = &mut self.running_mean.value[[ch]];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean_acc[ch];
            let rv = &mut self.running_var.value[[ch]];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var_acc[ch];
        }
        let y = Array4::from_shape_vec((n, c, h, w), out).unwrap();
        (
            y,
            BnCache {
                xhat,
                inv_std,
                groups,
                dims: (n, c, h, w),
                train: true,
            },
        )
    }

    pub fn backward(&mut self, cache: BnCache, dy: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = cache.dims;
        let hw = h * w;
        let dy = dy.as_standard_layout();
        let ds = dy.as_slice().unwrap();
        let mut dx = vec![0.0; ds.len()];
        let want = self.gamma.wants_grad();
        if !cache.train {
            for ch in 0..c {
                let k = self.gamma.value[[ch]] * cache.inv_std[ch];
                for ni in 0..n {
                    let o = (ni * c + ch) * hw;
                    for i in o..o + hw {
                        dx[i] = ds[i] * k;
                    }
                }
            }
            // Gradients for the affine part need xhat; recompute it from dy-independent
            // running statistics is not possible without x, so eval-mode BN is treated
            // as a fixed affine map.
            return Array4::from_shape_vec((n, c, h, w), dx).unwrap();
        }
        for (gi, &(s, e)) in cache.groups.iter().enumerate() {
            let m = ((e - s) * hw) as f64;
            for ch in 0..c {
                let inv = cache.inv_std[gi * c + ch];
                let g = self.gamma.value[[ch]];
                let (mut sum_dy, mut sum_dy_xh) = (0.0, 0.0);
                for ni in s..e {
                    let o = (ni * c + ch) * hw;
                    for i in o..o + hw {
                        sum_dy += ds[i];
                        sum_dy_xh += ds[i] * cache.xhat[i];
                    }
                }
                if want {
                    self.gamma.grad[[ch]] += sum_dy_xh;
                    self.beta.grad[[ch]] += sum_dy;
                }
                let k = g * inv / m;
                for ni in s..e {
                    let o = (ni * c + ch) * hw;
                    for i in o..o + hw {
                        dx[i] = k * (m * ds[i] - sum_dy - cache.xhat[i] * sum_dy_xh);
                    }
                }
            }
        }
        Array4::from_shape_vec((n, c, h, w), dx).unwrap()
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Fully connected layer over `[batch, features]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(inp: usize, out: usize, rng: &mut R) -> Self {
        Linear {
            weight: Param::kaiming(&[out, inp], inp, rng),
            bias: Param::zeros(&[out]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn w(&self) -> ndarray::ArrayView2<'_, f64> {
        self.weight.value.view().into_dimensionality().unwrap()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let b: ndarray::ArrayView1<f64> = self.bias.value.view().into_dimensionality().unwrap();
        x.dot(&self.w().t()) + &b
    }

    /// Returns the input gradient; `x` is the forward input.
    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        if self.weight.wants_grad() {
            let gw = dy.t().dot(x);
            let mut g: ndarray::ArrayViewMut2<f64> =
                self.weight.grad.view_mut().into_dimensionality().unwrap();
            g += &gw;
            let gb = dy.sum_axis(Axis(0));
            let mut b: ndarray::ArrayViewMut1<f64> =
                self.bias.grad.view_mut().into_dimensionality().unwrap();
            b += &gb;
        }
        dy.dot(&self.w())
    }
}

crate::impl_module!(Linear { weight, bias });

pub fn relu4(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn leaky4(x: &Array4<f64>, slope: f64) -> Array4<f64> {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

/// 2×2 max pooling with stride 2 (even spatial dims).
pub fn maxpool2(x: &Array4<f64>) -> (Array4<f64>, Vec<usize>) {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let mut out = vec![0.0; n * c * ho * wo];
    let mut arg = vec![0usize; out.len()];
    for nc in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = nc * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if xs[i] > best {
                            best = xs[i];
                            bi = i;
                        }
                    }
                }
                let o = nc * ho * wo + oy * wo + ox;
                out[o] = best;
                arg[o] = bi;
            }
        }
    }
    (Array4::from_shape_vec((n, c, ho, wo), out).unwrap(), arg)
}

pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let hw = (h * w) as f64;
    Array2::from_shape_fn((n, c), |(i, j)| {
        x.slice(ndarray::s![i, j, .., ..]).sum() / hw
    })
}

pub fn global_avg_pool_backward(dy: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, c) = dy.dim();
    let hw = (h * w) as f64;
    Array4::from_shape_fn((n, c, h, w), |(i, j, _, _)| dy[[i, j]] / hw)
}

/// One layer of a [`Sequential`] stack.
#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2d),
    ConvT(ConvTranspose2d),
    Bn(BatchNorm2d),
    Relu,
    LeakyRelu(f64),
    MaxPool2,
    Res(ResBlock),
    Basic(BasicBlock),
}

#[derive(Debug)]
pub enum LayerCache {
    Conv(ConvCache),
    ConvT(ConvTCache),
    Bn(BnCache),
    Act(Array4<f64>),
    Pool(Vec<usize>, (usize, usize, usize, usize)),
    Res(SeqCache),
    Basic(Box<BasicCache>),
}

impl Layer {
    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::ConvT(c) => c.forward(x),
            Layer::Bn(b) => b.forward(x),
            Layer::Relu => relu4(x),
            Layer::LeakyRelu(s) => leaky4(x, *s),
            Layer::MaxPool2 => maxpool2(x).0,
            Layer::Res(r) => r.forward(x),
            Layer::Basic(b) => b.forward(x),
        }
    }

    pub fn forward_cached(&mut self, x: &Array4<f64>, ctx: Ctx) -> (Array4<f64>, LayerCache) {
        match self {
            Layer::Conv(c) => {
                let (y, k) = c.forward_cached(x);
                (y, LayerCache::Conv(k))
            }
            Layer::ConvT(c) => {
                let (y, k) = c.forward_cached(x);
                (y, LayerCache::ConvT(k))
            }
            Layer::Bn(b) => {
                let (y, k) = b.forward_cached(x, ctx);
                (y, LayerCache::Bn(k))
            }
            Layer::Relu => (relu4(x), LayerCache::Act(x.clone())),
            Layer::LeakyRelu(s) => (leaky4(x, *s), LayerCache::Act(x.clone())),
            Layer::MaxPool2 => {
                let (y, arg) = maxpool2(x);
                (y, LayerCache::Pool(arg, x.dim()))
            }
            Layer::Res(r) => {
                let (y, k) = r.forward_cached(x, ctx);
                (y, LayerCache::Res(k))
            }
            Layer::Basic(b) => {
                let (y, k) = b.forward_cached(x, ctx);
                (y, LayerCache::Basic(Box::new(k)))
            }
        }
    }

    pub fn backward(&mut self, cache: LayerCache, dy: &Array4<f64>) -> Array4<f64> {
        match (self, cache) {
            (Layer::Conv(c), LayerCache::Conv(k)) => c.backward(k, dy),
            (Layer::ConvT(c), LayerCache::ConvT(k)) => c.backward(k, dy),
            (Layer::Bn(b), LayerCache::Bn(k)) => b.backward(k, dy),
            (Layer::Relu, LayerCache::Act(x)) => {
                ndarray::Zip::from(dy).and(&x).map_collect(|&g, &v| if v > 0.0 { g } else { 0.0 })
            }
            (Layer::LeakyRelu(s), LayerCache::Act(x)) => {
                let s = *s;
                ndarray::Zip::from(dy).and(&x).map_collect(|&g, &v| if v > 0.0 { g } else { s * g })
            }
            (Layer::MaxPool2, LayerCache::Pool(arg, dims)) => {
                let mut dx = vec![0.0; dims.0 * dims.1 * dims.2 * dims.3];
                let dy = dy.as_standard_layout();
                for (g, &i) in dy.as_slice().unwrap().iter().zip(&arg) {
                    dx[i] += g;
                }
                Array4::from_shape_vec(dims, dx).unwrap()
            }
            (Layer::Res(r), LayerCache::Res(k)) => r.backward(k, dy),
            (Layer::Basic(b), LayerCache::Basic(k)) => b.backward(*k, dy),
            _ => panic!("layer/cache mismatch"),
        }
    }
}

impl Module for Layer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        match self {
            Layer::Conv(c) => c.visit(prefix, f),
            Layer::ConvT(c) => c.visit(prefix, f),
            Layer::Bn(b) => b.visit(prefix, f),
            Layer::Res(r) => r.visit(prefix, f),
            Layer::Basic(b) => b.visit(prefix, f),
            Layer::Relu | Layer::LeakyRelu(_) | Layer::MaxPool2 => {}
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            Layer::Conv(c) => c.visit_mut(prefix, f),
            Layer::ConvT(c) => c.visit_mut(prefix, f),
            Layer::Bn(b) => b.visit_mut(prefix, f),
            Layer::Res(r) => r.visit_mut(prefix, f),
            Layer::Basic(b) => b.visit_mut(prefix, f),
            Layer::Relu | Layer::LeakyRelu(_) | Layer::MaxPool2 => {}
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

#[derive(Debug)]
pub struct SeqCache(Vec<LayerCache>);

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h);
        }
        h
    }

    pub fn forward_cached(&mut self, x: &Array4<f64>, ctx: Ctx) -> (Array4<f64>, SeqCache) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &mut self.layers {
            let (y, c) = l.forward_cached(&h, ctx);
            caches.push(c);
            h = y;
        }
        (h, SeqCache(caches))
    }

    pub fn backward(&mut self, cache: SeqCache, dy: &Array4<f64>) -> Array4<f64> {
        let mut g = dy.clone();
        for (l, c) in self.layers.iter_mut().zip(cache.0).rev() {
            g = l.backward(c, &g);
        }
        g
    }
}

impl Module for Sequential {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.layers.visit(prefix, f)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.layers.visit_mut(prefix, f)
    }
}

/// Two 3×3 convolutions around an identity shortcut.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub body: Sequential,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(channels: usize, slope: f64, rng: &mut R) -> Self {
        let mut second = Conv2d::new(channels, channels, 3, 1, 1, true, rng);
        // Start close to identity so deep stacks stay well conditioned.
        second.weight.value.mapv_inplace(|v| v * 0.1);
        ResBlock {
            body: Sequential::new(vec![
                Layer::Conv(Conv2d::new(channels, channels, 3, 1, 1, true, rng)),
                Layer::LeakyRelu(slope),
                Layer::Conv(second),
            ]),
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        x + &self.body.forward(x)
    }

    pub fn forward_cached(&mut self, x: &Array4<f64>, ctx: Ctx) -> (Array4<f64>, SeqCache) {
        let (b, c) = self.body.forward_cached(x, ctx);
        (x + &b, c)
    }

    pub fn backward(&mut self, cache: SeqCache, dy: &Array4<f64>) -> Array4<f64> {
        dy + &self.body.backward(cache, dy)
    }
}

crate::impl_module!(ResBlock { body });

/// Residual-network basic block: conv-bn-relu-conv-bn plus (projected) shortcut, then relu.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub body: Sequential,
    pub shortcut: Option<Sequential>,
}

#[derive(Debug)]
pub struct BasicCache {
    body: SeqCache,
    shortcut: Option<SeqCache>,
    pre: Array4<f64>,
}

impl BasicBlock {
    pub fn new<R: Rng + ?Sized>(inp: usize, out: usize, stride: usize, rng: &mut R) -> Self {
        let body = Sequential::new(vec![
            Layer::Conv(Conv2d::new(inp, out, 3, stride, 1, false, rng)),
            Layer::Bn(BatchNorm2d::new(out)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(out, out, 3, 1, 1, false, rng)),
            Layer::Bn(BatchNorm2d::new(out)),
        ]);
        let shortcut = (stride != 1 || inp != out).then(|| {
            Sequential::new(vec![
                Layer::Conv(Conv2d::new(inp, out, 1, stride, 0, false, rng)),
                Layer::Bn(BatchNorm2d::new(out)),
            ])
        });
        BasicBlock { body, shortcut }
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let b = self.body.forward(x);
        let s = match &self.shortcut {
            Some(sc) => sc.forward(x),
            None => x.clone(),
        };
        relu4(&(b + s))
    }

    pub fn forward_cached(&mut self, x: &Array4<f64>, ctx: Ctx) -> (Array4<f64>, BasicCache) {
        let (b, bc) = self.body.forward_cached(x, ctx);
        let (s, sc) = match &mut self.shortcut {
            Some(sh) => {
                let (s, c) = sh.forward_cached(x, ctx);
                (s, Some(c))
            }
            None => (x.clone(), None),
        };
        let pre = b + s;
        let y = relu4(&pre);
        (
            y,
            BasicCache {
                body: bc,
                shortcut: sc,
                pre,
            },
        )
    }

    pub fn backward(&mut self, cache: BasicCache, dy: &Array4<f64>) -> Array4<f64> {
        let g = ndarray::Zip::from(dy)
            .and(&cache.pre)
            .map_collect(|&d, &p| if p > 0.0 { d } else { 0.0 });
        let dx_body = self.body.backward(cache.body, &g);
        let dx_sc = match (&mut self.shortcut, cache.shortcut) {
            (Some(sh), Some(c)) => sh.backward(c, &g),
            _ => g,
        };
        dx_body + dx_sc
    }
}

crate::impl_module!(BasicBlock { body, shortcut });

/// Softplus and its derivative (the logistic function).
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn l2_normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-12));
    let y = x / &norms.view().insert_axis(Axis(1));
    (y, norms)
}

/// Backward of row-wise L2 normalization given the normalized output `y`.
pub fn l2_normalize_rows_backward(y: &Array2<f64>, norms: &Array1<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    for ((mut dr, yr), &n) in dx.outer_iter_mut().zip(y.outer_iter()).zip(norms.iter()) {
        let dot = dr.dot(&yr);
        dr.zip_mut_with(&yr, |d, &yv| *d = (*d - yv * dot) / n);
    }
    dx
}
