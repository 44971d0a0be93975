//! Deterministic synthetic scenes of colored shapes with dense labels.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesSample {
    /// `[3, h, w]` intensities in 0..1.
    pub image: Array3<f64>,
    /// Class of the topmost shape at each pixel; 0 is background.
    pub mask: Array2<u8>,
    pub seed: u64,
    /// Class covering the most pixels (the scene label for classification).
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Triangle { p: [(f64, f64); 3] },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
            Shape::Triangle { p } => {
                let cross = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let d1 = cross(p[0], p[1]);
                let d2 = cross(p[1], p[2]);
                let d3 = cross(p[2], p[0]);
                !((d1 < 0.0 || d2 < 0.0 || d3 < 0.0) && (d1 > 0.0 || d2 > 0.0 || d3 > 0.0))
            }
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => (x1 - x0) * (y1 - y0),
            Shape::Ellipse { rx, ry, .. } => std::f64::consts::PI * rx * ry,
            Shape::Triangle { p } => {
                0.5 * ((p[1].0 - p[0].0) * (p[2].1 - p[0].1) - (p[2].0 - p[0].0) * (p[1].1 - p[0].1)).abs()
            }
        }
    }

    pub fn perimeter(&self) -> f64 {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => 2.0 * ((x1 - x0) + (y1 - y0)),
            Shape::Ellipse { rx, ry, .. } => {
                // Ramanujan's approximation.
                let h = ((rx - ry) / (rx + ry)).powi(2);
                std::f64::consts::PI * (rx + ry) * (1.0 + 3.0 * h / (10.0 + (4.0 - 3.0 * h).sqrt()))
            }
            Shape::Triangle { p } => {
                let d = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                d(p[0], p[1]) + d(p[1], p[2]) + d(p[2], p[0])
            }
        }
    }

    /// Pixels whose centers fall inside the shape.
    pub fn rasterize(&self, h: usize, w: usize) -> Array2<bool> {
        Array2::from_shape_fn((h, w), |(y, x)| self.contains(x as f64 + 0.5, y as f64 + 0.5))
    }

    fn random<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Shape {
        let (hf, wf) = (h as f64, w as f64);
        let size = |rng: &mut R, dim: f64| rng.random_range(0.15 * dim..0.45 * dim);
        match rng.random_range(0..3) {
            0 => {
                let (sw, sh) = (size(rng, wf), size(rng, hf));
                let x0 = rng.random_range(0.0..wf - sw);
                let y0 = rng.random_range(0.0..hf - sh);
                Shape::Rect { x0, y0, x1: x0 + sw, y1: y0 + sh }
            }
            1 => {
                let (rx, ry) = (size(rng, wf) / 2.0, size(rng, hf) / 2.0);
                Shape::Ellipse {
                    cx: rng.random_range(rx..wf - rx),
                    cy: rng.random_range(ry..hf - ry),
                    rx,
                    ry,
                }
            }
            _ => {
                let (sw, sh) = (size(rng, wf) * 1.4, size(rng, hf) * 1.4);
                let x0 = rng.random_range(0.0..wf - sw);
                let y0 = rng.random_range(0.0..hf - sh);
                let pt = |rng: &mut R| (x0 + rng.random_range(0.0..sw), y0 + rng.random_range(0.0..sh));
                let mut p = [pt(rng), pt(rng), pt(rng)];
                // Avoid degenerate slivers.
                let mut tries = 0;
                while (Shape::Triangle { p }).area() < 0.15 * sw * sh && tries < 20 {
                    p = [(x0, y0 + sh), (x0 + sw, y0 + sh), (x0 + rng.random_range(0.0..sw), y0)];
                    tries += 1;
                }
                Shape::Triangle { p }
            }
        }
    }
}

/// Base color of a class: evenly spaced hues.
pub fn class_color(class: usize, num_classes: usize) -> [f64; 3] {
    let h = (class - 1) as f64 / num_classes as f64 * 6.0;
    let (s, v) = (0.75, 0.85);
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn render_one(h: usize, w: usize, num_classes: usize, seed: u64) -> ShapesSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.02).unwrap();
    let bg = rng.random_range(0.15..0.55);
    let mut image = Array3::from_elem((3, h, w), bg);
    let mut mask = Array2::<u8>::zeros((h, w));
    let count = rng.random_range(1..=5);
    for _ in 0..count {
        let shape = Shape::random(h, w, &mut rng);
        let class = rng.random_range(1..=num_classes);
        let base = class_color(class, num_classes);
        let color: Vec<f64> = base.iter().map(|c| c + rng.random_range(-0.06..0.06)).collect();
        let r = shape.rasterize(h, w);
        for ((y, x), &inside) in r.indexed_iter() {
            if inside {
                mask[[y, x]] = class as u8;
                for c in 0..3 {
                    image[[c, y, x]] = color[c];
                }
            }
        }
    }
    image.mapv_inplace(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0));
    let mut hist = vec![0usize; num_classes + 1];
    mask.iter().for_each(|&m| hist[m as usize] += 1);
    let label = (1..=num_classes).max_by_key(|&k| (hist[k], std::cmp::Reverse(k))).unwrap_or(1);
    ShapesSample { image, mask, seed, label }
}

/// Generates `n` scenes of `dims = (h, w)` with classes `1..=num_classes`.
pub fn generate_shapes(n: usize, dims: (usize, usize), num_classes: usize, seed: u64) -> Result<Vec<ShapesSample>> {
    let (h, w) = dims;
    if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("shape scenes need dims divisible by 32, got {h}x{w}")));
    }
    if num_classes == 0 || num_classes > 255 {
        return Err(Error::InvalidArgument(format!("num_classes {num_classes}")));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| render_one(h, w, num_classes, master.random())).collect())
}

const CACHE_MAGIC: &[u8; 4] = b"OISH";

fn cache_path(dir: &Path, n: usize, dims: (usize, usize), classes: usize, seed: u64) -> PathBuf {
    dir.join(format!("shapes-n{n}-{}x{}-c{classes}-s{seed}.bin", dims.0, dims.1))
}

fn encode_archive(samples: &[ShapesSample]) -> Vec<u8> {
    let mut out = CACHE_MAGIC.to_vec();
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        let (_, h, w) = s.image.dim();
        out.extend_from_slice(&(h as u32).to_le_bytes());
        out.extend_from_slice(&(w as u32).to_le_bytes());
        out.extend_from_slice(&s.seed.to_le_bytes());
        out.extend_from_slice(&(s.label as u32).to_le_bytes());
        for v in s.image.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(s.mask.iter().copied());
    }
    out
}

fn decode_archive(bytes: &[u8]) -> Option<Vec<ShapesSample>> {
    let mut pos = 0;
    let mut take = |n: usize| -> Option<&[u8]> {
        let s = bytes.get(pos..pos + n)?;
        pos += n;
        Some(s)
    };
    if take(4)? != CACHE_MAGIC {
        return None;
    }
    let u32_ = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let n = u32_(take(4)?);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let h = u32_(take(4)?);
        let w = u32_(take(4)?);
        let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let label = u32_(take(4)?);
        let img: Vec<f64> = take(3 * h * w * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mask = take(h * w)?.to_vec();
        out.push(ShapesSample {
            image: Array3::from_shape_vec((3, h, w), img).ok()?,
            mask: Array2::from_shape_vec((h, w), mask).ok()?,
            seed,
            label,
        });
    }
    (pos == bytes.len()).then_some(out)
}

/// Like [`generate_shapes`], reading and writing a single binary archive
/// in `cache_dir` keyed by all generation parameters.
pub fn generate_shapes_cached(
    cache_dir: Option<&Path>,
    n: usize,
    dims: (usize, usize),
    num_classes: usize,
    seed: u64,
) -> Result<Vec<ShapesSample>> {
    let Some(dir) = cache_dir else {
        return generate_shapes(n, dims, num_classes, seed);
    };
    let path = cache_path(dir, n, dims, num_classes, seed);
    if let Ok(bytes) = std::fs::read(&path) {
        if let Some(s) = decode_archive(&bytes) {
            return Ok(s);
        }
        log::warn!("ignoring unreadable shapes cache {}", path.display());
    }
    let samples = generate_shapes(n, dims, num_classes, seed)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    std::fs::write(&path, encode_archive(&samples)).map_err(|e| Error::io(&path, e))?;
    Ok(samples)
}
