use ndarray::{s, Array3, Array4, Axis};

use crate::error::{Error, Result};

/// A dense `[channels, height, width]` activation with its downsampling
/// factor relative to the source image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub downsample: usize,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, downsample: usize) -> Self {
        FeatureMap { data, downsample }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Adds a leading batch axis of length one.
    pub fn to_batch(&self) -> Array4<f64> {
        self.data.clone().insert_axis(Axis(0))
    }

    /// Splits a batch into maps.
    pub fn from_batch(batch: &Array4<f64>, downsample: usize) -> Vec<FeatureMap> {
        batch
            .outer_iter()
            .map(|a| FeatureMap::new(a.to_owned(), downsample))
            .collect()
    }

    /// Stacks maps of identical shape into a batch.
    pub fn stack(maps: &[FeatureMap]) -> Result<Array4<f64>> {
        let first = maps
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty feature batch".into()))?;
        let (c, h, w) = first.dims();
        let mut out = Array4::zeros((maps.len(), c, h, w));
        for (i, m) in maps.iter().enumerate() {
            if m.dims() != (c, h, w) {
                return Err(Error::Shape(format!("feature {i} has dims {:?}, expected {:?}", m.dims(), (c, h, w))));
            }
            out.slice_mut(s![i, .., .., ..]).assign(&m.data);
        }
        Ok(out)
    }
}

/// Squared error summed over channels and averaged over spatial
/// positions and the batch.
pub fn spatial_mse(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    let (n, _, h, w) = a.dim();
    let d = a - b;
    d.mapv(|v| v * v).sum() / (n * h * w) as f64
}

pub(crate) fn check_channels(x: &Array4<f64>, expected: usize, what: &str) -> Result<()> {
    if x.dim().1 != expected {
        return Err(Error::Shape(format!(
            "{what} expects {expected} channels, got {}",
            x.dim().1
        )));
    }
    Ok(())
}

pub(crate) fn check_divisible(x: &Array4<f64>, k: usize, what: &str) -> Result<()> {
    let (_, _, h, w) = x.dim();
    if h % k != 0 || w % k != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("{what} needs spatial dims divisible by {k}, got {h}x{w}")));
    }
    Ok(())
}
