//! Random views for contrastive training. Images are `[3, h, w]` in 0..1.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Output side length; must be a multiple of 32.
    pub crop: usize,
    pub scale_min: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop: 64,
            scale_min: 0.2,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
            flip_prob: 0.5,
        }
    }
}

/// Bilinear sample of the region `[y0, y0+hh) x [x0, x0+ww)` onto `out x out`.
fn resize_region(img: &Array3<f64>, y0: f64, x0: f64, hh: f64, ww: f64, out: usize) -> Array3<f64> {
    let (c, h, w) = img.dim();
    Array3::from_shape_fn((c, out, out), |(k, oy, ox)| {
        let sy = (y0 + (oy as f64 + 0.5) * hh / out as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let sx = (x0 + (ox as f64 + 0.5) * ww / out as f64 - 0.5).clamp(0.0, (w - 1) as f64);
        let (iy, ix) = (sy.floor() as usize, sx.floor() as usize);
        let (fy, fx) = (sy - iy as f64, sx - ix as f64);
        let (iy1, ix1) = ((iy + 1).min(h - 1), (ix + 1).min(w - 1));
        let a = img[[k, iy, ix]] * (1.0 - fx) + img[[k, iy, ix1]] * fx;
        let b = img[[k, iy1, ix]] * (1.0 - fx) + img[[k, iy1, ix1]] * fx;
        a * (1.0 - fy) + b * fy
    })
}

pub fn random_resized_crop<R: Rng + ?Sized>(img: &Array3<f64>, out: usize, scale_min: f64, rng: &mut R) -> Array3<f64> {
    let (_, h, w) = img.dim();
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * rng.random_range(scale_min..=1.0);
        let log_ratio = rng.random_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln());
        let ratio = log_ratio.exp();
        let cw = (target * ratio).sqrt();
        let ch = (target / ratio).sqrt();
        if cw <= w as f64 && ch <= h as f64 {
            let y0 = rng.random_range(0.0..=(h as f64 - ch));
            let x0 = rng.random_range(0.0..=(w as f64 - cw));
            return resize_region(img, y0, x0, ch, cw, out);
        }
    }
    let s = h.min(w) as f64;
    resize_region(img, (h as f64 - s) / 2.0, (w as f64 - s) / 2.0, s, s, out)
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn map_pixels(img: &mut Array3<f64>, f: impl Fn(f64, f64, f64) -> (f64, f64, f64)) {
    let (_, h, w) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = f(img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
            img[[0, y, x]] = r.clamp(0.0, 1.0);
            img[[1, y, x]] = g.clamp(0.0, 1.0);
            img[[2, y, x]] = b.clamp(0.0, 1.0);
        }
    }
}

/// Brightness, contrast, saturation and hue jitter applied in random order.
pub fn color_jitter<R: Rng + ?Sized>(img: &mut Array3<f64>, cfg: &AugmentConfig, rng: &mut R) {
    let factor = |s: f64, rng: &mut R| if s > 0.0 { rng.random_range((1.0 - s).max(0.0)..=1.0 + s) } else { 1.0 };
    let bf = factor(cfg.brightness, rng);
    let cf = factor(cfg.contrast, rng);
    let sf = factor(cfg.saturation, rng);
    let hf = if cfg.hue > 0.0 { rng.random_range(-cfg.hue..=cfg.hue) } else { 0.0 };
    let mut order = [0usize, 1, 2, 3];
    rand::seq::SliceRandom::shuffle(&mut order[..], rng);
    for op in order {
        match op {
            0 => map_pixels(img, |r, g, b| (r * bf, g * bf, b * bf)),
            1 => {
                let (_, h, w) = img.dim();
                let mut m = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        m += luma(img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
                    }
                }
                m /= (h * w) as f64;
                map_pixels(img, |r, g, b| (m + cf * (r - m), m + cf * (g - m), m + cf * (b - m)));
            }
            2 => map_pixels(img, |r, g, b| {
                let l = luma(r, g, b);
                (l + sf * (r - l), l + sf * (g - l), l + sf * (b - l))
            }),
            _ => map_pixels(img, |r, g, b| {
                let (h, s, v) = rgb_to_hsv(r, g, b);
                hsv_to_rgb(h + hf, s, v)
            }),
        }
    }
}

pub fn grayscale(img: &mut Array3<f64>) {
    map_pixels(img, |r, g, b| {
        let l = luma(r, g, b);
        (l, l, l)
    });
}

pub fn hflip(img: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = img.dim();
    Array3::from_shape_fn((c, h, w), |(k, y, x)| img[[k, y, w - 1 - x]])
}

/// Separable Gaussian blur with edge clamping; the kernel radius is
/// three standard deviations.
pub fn gaussian_blur(img: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let kern: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kern.iter().sum();
    let (c, h, w) = img.dim();
    let tmp = Array3::from_shape_fn((c, h, w), |(k, y, x)| {
        (-r..=r)
            .map(|i| img[[k, y, (x as isize + i).clamp(0, w as isize - 1) as usize]] * kern[(i + r) as usize])
            .sum::<f64>()
            / norm
    });
    Array3::from_shape_fn((c, h, w), |(k, y, x)| {
        (-r..=r)
            .map(|i| tmp[[k, (y as isize + i).clamp(0, h as isize - 1) as usize, x]] * kern[(i + r) as usize])
            .sum::<f64>()
            / norm
    })
}

/// One random view.
pub fn augment<R: Rng + ?Sized>(img: &Array3<f64>, cfg: &AugmentConfig, rng: &mut R) -> Array3<f64> {
    let mut v = random_resized_crop(img, cfg.crop, cfg.scale_min, rng);
    if rng.random_bool(cfg.jitter_prob) {
        color_jitter(&mut v, cfg, rng);
    }
    if rng.random_bool(cfg.grayscale_prob) {
        grayscale(&mut v);
    }
    if rng.random_bool(cfg.blur_prob) {
        // Sigma range is specified for 224-pixel crops; scale it to the crop.
        let scale = cfg.crop as f64 / 224.0;
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1) * scale;
        if sigma > 0.05 {
            v = gaussian_blur(&v, sigma);
        }
    }
    if rng.random_bool(cfg.flip_prob) {
        v = hflip(&v);
    }
    v
}

/// Two independent views of one image.
pub fn augment_pair<R: Rng + ?Sized>(img: &Array3<f64>, cfg: &AugmentConfig, rng: &mut R) -> (Array3<f64>, Array3<f64>) {
    let a = augment(img, cfg, rng);
    let b = augment(img, cfg, rng);
    (a, b)
}
