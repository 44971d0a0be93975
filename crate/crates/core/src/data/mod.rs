//! Dataset ingestion, normalization, padding and synthetic data.

pub mod augment;
pub mod shapes;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, augment_pair, AugmentConfig};
pub use shapes::{generate_shapes, generate_shapes_cached, ShapesSample};

/// Inputs are padded so that every spatial dim is a multiple of this.
pub const PAD_MULTIPLE: usize = 32;

/// Per-channel statistics in 0..255 pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [123.675, 116.28, 103.53],
            std: [58.395, 57.12, 57.375],
        }
    }
}

impl Normalization {
    /// Maps 0..1 intensities to normalized values.
    pub fn apply_unit(&self, img: &Array3<f64>) -> Array3<f64> {
        let mut out = img.clone();
        for (c, mut plane) in out.outer_iter_mut().enumerate() {
            let (m, s) = (self.mean[c % 3], self.std[c % 3]);
            plane.mapv_inplace(|v| (v * 255.0 - m) / s);
        }
        out
    }

    /// Maps raw 0..255 pixel values to normalized values.
    pub fn apply_pixel(&self, c: usize, v: f64) -> f64 {
        (v - self.mean[c]) / self.std[c]
    }

    /// Inverse of [`Normalization::apply_unit`].
    pub fn invert_unit(&self, img: &Array3<f64>) -> Array3<f64> {
        let mut out = img.clone();
        for (c, mut plane) in out.outer_iter_mut().enumerate() {
            let (m, s) = (self.mean[c % 3], self.std[c % 3]);
            plane.mapv_inplace(|v| (v * s + m) / 255.0);
        }
        out
    }
}

/// Pads `[c, h, w]` up to multiples of `m` by replicating edge pixels.
pub fn pad_edge(img: &Array3<f64>, m: usize) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    Array3::from_shape_fn((c, ph, pw), |(k, y, x)| img[[k, y.min(h - 1), x.min(w - 1)]])
}

/// Crops a padded map back to its original size.
pub fn unpad(img: &Array3<f64>, dims: (usize, usize)) -> Array3<f64> {
    img.slice(s![.., ..dims.0, ..dims.1]).to_owned()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Target {
    None,
    Class(usize),
    Mask(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub items: Vec<(PathBuf, Target)>,
    pub norm: Normalization,
}

impl DatasetManifest {
    /// Parses line-delimited `image_path[,label]` text. Relative paths
    /// resolve against `root`; a numeric label is a class id, anything
    /// else a mask path. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str, root: &Path, split: Split, norm: Normalization) -> Result<Self> {
        let mut items = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (img, label) = match line.split_once(',') {
                Some((a, b)) => (a.trim(), Some(b.trim())),
                None => (line, None),
            };
            if img.is_empty() {
                return Err(Error::Config(format!("manifest line {} has no image path", ln + 1)));
            }
            let target = match label {
                None | Some("") => Target::None,
                Some(l) => match l.parse::<usize>() {
                    Ok(k) => Target::Class(k),
                    Err(_) => Target::Mask(root.join(l)),
                },
            };
            items.push((root.join(img), target));
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            split,
            items,
            norm,
        })
    }

    pub fn from_file(path: &Path, split: Split, norm: Normalization) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, root, split, norm)
    }

    /// Every listed file must exist.
    pub fn verify(&self) -> Result<()> {
        for (p, t) in &self.items {
            if !p.is_file() {
                return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "listed image is missing")));
            }
            if let Target::Mask(m) = t {
                if !m.is_file() {
                    return Err(Error::io(m, std::io::Error::new(std::io::ErrorKind::NotFound, "listed mask is missing")));
                }
            }
        }
        Ok(())
    }
}

/// Fails when two splits share an image path.
pub fn check_disjoint(a: &DatasetManifest, b: &DatasetManifest) -> Result<()> {
    let set: HashSet<&PathBuf> = a.items.iter().map(|(p, _)| p).collect();
    if let Some((p, _)) = b.items.iter().find(|(p, _)| set.contains(p)) {
        return Err(Error::Config(format!("{} appears in both splits", p.display())));
    }
    Ok(())
}

/// One loaded example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Normalized `[3, H', W']`, padded to multiples of 32.
    pub image: Array3<f64>,
    /// Dims before padding, used for bits-per-pixel.
    pub original_dims: (usize, usize),
    pub label: Option<usize>,
    pub mask: Option<Vec<u8>>,
}

/// Reads an RGB image as `[3, h, w]` intensities in 0..1.
pub fn read_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                msg: other.to_string(),
            },
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

fn read_mask(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok((img.into_raw(), h as usize, w as usize))
}

/// Saves `[3, h, w]` intensities in 0..1 as an 8-bit PNG.
pub fn write_rgb(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (_, h, w) = img.dim();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (img[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    if let Some(d) = path.parent() {
        if !d.as_os_str().is_empty() {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Turns 0..1 intensities into a normalized, padded sample.
pub fn prepare(img: &Array3<f64>, norm: &Normalization) -> (Array3<f64>, (usize, usize)) {
    let (_, h, w) = img.dim();
    (pad_edge(&norm.apply_unit(img), PAD_MULTIPLE), (h, w))
}

/// Loads every manifest item in an order shuffled by `seed`.
pub fn load_dataset(manifest: &DatasetManifest, seed: u64) -> Result<Vec<Sample>> {
    manifest.verify()?;
    let mut order: Vec<usize> = (0..manifest.items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .into_iter()
        .map(|i| {
            let (path, target) = &manifest.items[i];
            let raw = read_rgb(path)?;
            let (image, original_dims) = prepare(&raw, &manifest.norm);
            let (label, mask) = match target {
                Target::None => (None, None),
                Target::Class(k) => (Some(*k), None),
                Target::Mask(m) => {
                    let (v, h, w) = read_mask(m)?;
                    if (h, w) != original_dims {
                        return Err(Error::Image {
                            path: m.clone(),
                            msg: format!("mask is {h}x{w}, image is {:?}", original_dims),
                        });
                    }
                    (None, Some(v))
                }
            };
            Ok(Sample {
                image,
                original_dims,
                label,
                mask,
            })
        })
        .collect()
}

/// Stacks equally sized images into a batch.
pub fn stack(images: &[&Array3<f64>]) -> Result<Array4<f64>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (c, h, w) = first.dim();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (i, im) in images.iter().enumerate() {
        if im.dim() != (c, h, w) {
            return Err(Error::Shape(format!("image {i} is {:?}, expected {:?}", im.dim(), (c, h, w))));
        }
        out.slice_mut(s![i, .., .., ..]).assign(im);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_replicates_edges_and_keeps_dims() {
        let img = Array3::from_shape_fn((3, 30, 30), |(c, y, x)| (c * 1000 + y * 30 + x) as f64);
        let p = pad_edge(&img, 32);
        assert_eq!(p.dim(), (3, 32, 32));
        assert_eq!(p[[1, 31, 31]], img[[1, 29, 29]]);
        assert_eq!(p[[2, 5, 31]], img[[2, 5, 29]]);
        assert_eq!(unpad(&p, (30, 30)), img);
    }

    #[test]
    fn normalization_arithmetic() {
        let n = Normalization {
            mean: [128.0; 3],
            std: [64.0; 3],
        };
        assert_eq!(n.apply_pixel(0, 128.0), 0.0);
        let img = Array3::from_elem((3, 2, 2), 0.25);
        let back = n.invert_unit(&n.apply_unit(&img));
        assert!((back - img).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn manifest_parsing_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array3::from_shape_fn((3, 30, 20), |(c, y, x)| ((c + y + x) % 7) as f64 / 7.0);
        write_rgb(&dir.path().join("a.png"), &img).unwrap();
        write_rgb(&dir.path().join("b.png"), &img).unwrap();
        std::fs::write(dir.path().join("bad.png"), b"not a png").unwrap();
        let text = "# comment\na.png,3\n\nb.png\n";
        let m = DatasetManifest::parse(text, dir.path(), Split::Train, Normalization::default()).unwrap();
        assert_eq!(m.items.len(), 2);
        assert_eq!(m.items[0].1, Target::Class(3));
        let d1 = load_dataset(&m, 4).unwrap();
        let d2 = load_dataset(&m, 4).unwrap();
        assert_eq!(d1, d2);
        assert!(d1.iter().all(|s| s.image.dim() == (3, 32, 32) && s.original_dims == (30, 20)));

        let missing = DatasetManifest::parse("nope.png", dir.path(), Split::Val, Normalization::default()).unwrap();
        let err = load_dataset(&missing, 0).unwrap_err().to_string();
        assert!(err.contains("nope.png"));
        let bad = DatasetManifest::parse("bad.png", dir.path(), Split::Val, Normalization::default()).unwrap();
        assert!(matches!(load_dataset(&bad, 0), Err(Error::Image { .. })));

        let val = DatasetManifest::parse("b.png", dir.path(), Split::Val, Normalization::default()).unwrap();
        assert!(check_disjoint(&m, &val).is_err());
        let other = DatasetManifest::parse("c.png", dir.path(), Split::Val, Normalization::default()).unwrap();
        assert!(check_disjoint(&m, &other).is_ok());
    }
}
