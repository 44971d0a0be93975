//! 2-D convolution and transposed convolution over NCHW batches.
//!
//! Both lower to a single GEMM per call through an im2col buffer that spans
//! the whole batch: rows are `(in_channel, ky, kx)`, columns are
//! `(sample, out_y, out_x)`.

use ndarray::{linalg::general_mat_mul, Array4, ArrayView2, ArrayViewMut2};
use rand::Rng;

use super::param::{join, Module, Param};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    pub fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.k) / self.stride + 1
    }
}

/// Unfolds `x` into `[c*k*k, n*ho*wo]` (row-major, contiguous).
pub(crate) fn im2col(x: &Array4<f64>, g: Geometry) -> (Vec<f64>, usize, usize) {
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (g.out_len(h), g.out_len(w));
    let ncols = n * ho * wo;
    let k = g.k;
    let mut cols = vec![0.0; c * k * k * ncols];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = ((ni * c + ci) * h + iy as usize) * w;
                        let base = (ni * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[base + ox] = xs[src + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col`]: folds `[c*k*k, n*ho*wo]` back onto an `n×c×h×w` image.
pub(crate) fn col2im(
    cols: &[f64],
    dims: (usize, usize, usize, usize),
    g: Geometry,
    ho: usize,
    wo: usize,
) -> Array4<f64> {
    let (n, c, h, w) = dims;
    let k = g.k;
    let ncols = n * ho * wo;
    let mut out = vec![0.0; n * c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = ((ni * c + ci) * h + iy as usize) * w;
                        let base = (ni * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                out[dst + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((n, c, h, w), out).expect("shape")
}

/// `[n, c, h, w]` to `[c, n*h*w]`.
pub(crate) fn to_channel_major(x: &Array4<f64>) -> Vec<f64> {
    let (n, c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let hw = h * w;
    let mut out = vec![0.0; c * n * hw];
    for ni in 0..n {
        for ci in 0..c {
            let src = &xs[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            out[ci * n * hw + ni * hw..ci * n * hw + (ni + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

/// `[c, n*h*w]` to `[n, c, h, w]`, adding a per-channel bias.
pub(crate) fn from_channel_major(
    v: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    bias: Option<&[f64]>,
) -> Array4<f64> {
    let hw = h * w;
    let mut out = vec![0.0; n * c * hw];
    for ci in 0..c {
        let b = bias.map_or(0.0, |b| b[ci]);
        for ni in 0..n {
            let src = &v[ci * n * hw + ni * hw..ci * n * hw + (ni + 1) * hw];
            let dst = &mut out[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    Array4::from_shape_vec((n, c, h, w), out).expect("shape")
}

fn view2(v: &[f64], r: usize, c: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((r, c), v).expect("gemm view")
}

fn view2_mut(v: &mut [f64], r: usize, c: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((r, c), v).expect("gemm view")
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub(crate) geom: Geometry,
}

#[derive(Debug)]
pub struct ConvCache {
    cols: Vec<f64>,
    in_dims: (usize, usize, usize, usize),
    ho: usize,
    wo: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * k * k;
        Conv2d {
            weight: Param::kaiming(&[out_channels, in_channels, k, k], fan_in, rng),
            bias: bias.then(|| Param::zeros(&[out_channels])),
            in_channels,
            out_channels,
            geom: Geometry { k, stride, pad },
        }
    }

    fn weight2(&self) -> ArrayView2<'_, f64> {
        let k = self.geom.k;
        view2(
            self.weight.value.as_slice().expect("contiguous weight"),
            self.out_channels,
            self.in_channels * k * k,
        )
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array4<f64>) -> (Array4<f64>, ConvCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (cols, ho, wo) = im2col(x, self.geom);
        let ncols = n * ho * wo;
        let rows = c * self.geom.k * self.geom.k;
        let mut out = vec![0.0; self.out_channels * ncols];
        general_mat_mul(
            1.0,
            &self.weight2(),
            &view2(&cols, rows, ncols),
            0.0,
            &mut view2_mut(&mut out, self.out_channels, ncols),
        );
        let bias = self.bias.as_ref().map(|b| b.value.as_slice().expect("bias"));
        let y = from_channel_major(&out, n, self.out_channels, ho, wo, bias);
        (
            y,
            ConvCache {
                cols,
                in_dims: (n, c, h, w),
                ho,
                wo,
            },
        )
    }

    pub fn backward(&mut self, cache: ConvCache, dy: &Array4<f64>) -> Array4<f64> {
        let (n, c, _, _) = cache.in_dims;
        let ncols = n * cache.ho * cache.wo;
        let rows = c * self.geom.k * self.geom.k;
        let dy2 = to_channel_major(dy);
        if let Some(b) = self.bias.as_mut().filter(|b| b.wants_grad()) {
            let g = b.grad.as_slice_mut().expect("bias grad");
            for (co, gv) in g.iter_mut().enumerate() {
                *gv += dy2[co * ncols..(co + 1) * ncols].iter().sum::<f64>();
            }
        }
        if self.weight.wants_grad() {
            let cols_t = view2(&cache.cols, rows, ncols);
            let gw = self.weight.grad.as_slice_mut().expect("weight grad");
            general_mat_mul(
                1.0,
                &view2(&dy2, self.out_channels, ncols),
                &cols_t.t(),
                1.0,
                &mut view2_mut(gw, self.out_channels, rows),
            );
        }
        let mut dcols = cache.cols;
        general_mat_mul(
            1.0,
            &self.weight2().t(),
            &view2(&dy2, self.out_channels, ncols),
            0.0,
            &mut view2_mut(&mut dcols, rows, ncols),
        );
        col2im(&dcols, cache.in_dims, self.geom, cache.ho, cache.wo)
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Transposed convolution; weight layout `[in, out, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub(crate) geom: Geometry,
    pub output_padding: usize,
}

#[derive(Debug)]
pub struct ConvTCache {
    x2: Vec<f64>,
    dims: (usize, usize, usize, usize),
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
        pad: usize,
        output_padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        // Each output pixel sees roughly in*k*k/stride^2 inputs.
        let fan_in = (in_channels * k * k / (stride * stride)).max(1);
        ConvTranspose2d {
            weight: Param::kaiming(&[in_channels, out_channels, k, k], fan_in, rng),
            bias: bias.then(|| Param::zeros(&[out_channels])),
            in_channels,
            out_channels,
            geom: Geometry { k, stride, pad },
            output_padding,
        }
    }

    pub fn out_len(&self, n: usize) -> usize {
        (n - 1) * self.geom.stride + self.geom.k + self.output_padding - 2 * self.geom.pad
    }

    fn weight2(&self) -> ArrayView2<'_, f64> {
        let k = self.geom.k;
        view2(
            self.weight.value.as_slice().expect("contiguous weight"),
            self.in_channels,
            self.out_channels * k * k,
        )
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array4<f64>) -> (Array4<f64>, ConvTCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "transposed conv input channels");
        let (ho, wo) = (self.out_len(h), self.out_len(w));
        let x2 = to_channel_major(x);
        let rows = self.out_channels * self.geom.k * self.geom.k;
        let ncols = n * h * w;
        let mut cols = vec![0.0; rows * ncols];
        general_mat_mul(
            1.0,
            &self.weight2().t(),
            &view2(&x2, c, ncols),
            0.0,
            &mut view2_mut(&mut cols, rows, ncols),
        );
        let mut y = col2im(&cols, (n, self.out_channels, ho, wo), self.geom, h, w);
        if let Some(b) = &self.bias {
            for (co, bv) in b.value.iter().enumerate() {
                y.slice_mut(ndarray::s![.., co, .., ..]).mapv_inplace(|v| v + bv);
            }
        }
        (y, ConvTCache { x2, dims: (n, c, h, w) })
    }

    pub fn backward(&mut self, cache: ConvTCache, dy: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = cache.dims;
        let (dcols, ho, wo) = im2col(dy, self.geom);
        debug_assert_eq!((ho, wo), (h, w));
        let rows = self.out_channels * self.geom.k * self.geom.k;
        let ncols = n * h * w;
        if let Some(b) = self.bias.as_mut().filter(|b| b.wants_grad()) {
            for (co, gv) in b.grad.iter_mut().enumerate() {
                *gv += dy.slice(ndarray::s![.., co, .., ..]).sum();
            }
        }
        if self.weight.wants_grad() {
            let gw = self.weight.grad.as_slice_mut().expect("weight grad");
            general_mat_mul(
                1.0,
                &view2(&cache.x2, c, ncols),
                &view2(&dcols, rows, ncols).t(),
                1.0,
                &mut view2_mut(gw, c, rows),
            );
        }
        let mut dx2 = vec![0.0; c * ncols];
        general_mat_mul(
            1.0,
            &self.weight2(),
            &view2(&dcols, rows, ncols),
            0.0,
            &mut view2_mut(&mut dx2, c, ncols),
        );
        from_channel_major(&dx2, n, c, h, w, None)
    }
}

impl Module for ConvTranspose2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}
