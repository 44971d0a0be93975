//! Discretized Gaussian and Gaussian-mixture likelihoods with analytic partials.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::LIKELIHOOD_FLOOR;
use crate::error::{Error, Result};

/// Lower bound for every scale parameter.
pub const SCALE_FLOOR: f64 = 0.11;

/// Mixture parameters for one latent element.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl GmmParams {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        let p = GmmParams { weights, means, scales };
        p.validate()?;
        Ok(p)
    }

    pub fn single(mean: f64, scale: f64) -> Self {
        GmmParams {
            weights: vec![1.0],
            means: vec![mean],
            scales: vec![scale],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.scales.len() != k {
            return Err(Error::InvalidArgument("mixture component counts differ".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument(format!("mixture weights sum to {sum}")));
        }
        if let Some(s) = self.scales.iter().find(|s| !(**s >= SCALE_FLOOR)) {
            return Err(Error::InvalidArgument(format!("scale {s} below floor {SCALE_FLOOR}")));
        }
        if self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("non-finite mean".into()));
        }
        Ok(())
    }

    /// Weighted mean of the component means.
    pub fn mixture_mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }
}

#[inline]
fn std_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// `P(Z > z)` for a standard normal, accurate in the upper tail.
#[inline]
pub fn std_upper_tail(z: f64) -> f64 {
    0.5 * libm::erfc(z * FRAC_1_SQRT_2)
}

/// `P(Z <= z)` for a standard normal.
#[inline]
pub fn std_cdf(z: f64) -> f64 {
    std_upper_tail(-z)
}

/// Mass of the unit bin centered at `y` under `N(mu, sigma^2)`, with
/// partials with respect to `y` and `sigma` (`d/dmu = -d/dy`).
///
/// Evaluated on the folded distance `|y - mu|` so that both CDF terms sit in
/// the upper tail.
#[inline]
pub fn gaussian_bin(y: f64, mu: f64, sigma: f64) -> (f64, f64, f64) {
    let t = y - mu;
    let a = t.abs();
    let zu = (0.5 - a) / sigma;
    let zl = (-0.5 - a) / sigma;
    let m = std_upper_tail(-zu) - std_upper_tail(-zl);
    let (pu, pl) = (std_pdf(zu), std_pdf(zl));
    let dm_da = (pl - pu) / sigma;
    let dm_dsigma = (pl * zl - pu * zu) / sigma;
    let sgn = if t > 0.0 {
        1.0
    } else if t < 0.0 {
        -1.0
    } else {
        0.0
    };
    (m.max(0.0), sgn * dm_da, dm_dsigma)
}

/// Floored mixture likelihood of the unit bin at `y`.
pub fn gmm_likelihood(y: f64, p: &GmmParams) -> f64 {
    gmm_mass(y, &p.weights, &p.means, &p.scales).max(LIKELIHOOD_FLOOR)
}

/// Floored single-Gaussian likelihood.
pub fn mean_scale_likelihood(y: f64, mean: f64, scale: f64) -> f64 {
    gaussian_bin(y, mean, scale.max(SCALE_FLOOR)).0.max(LIKELIHOOD_FLOOR)
}

/// Unfloored mixture bin mass.
pub fn gmm_mass(y: f64, w: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    w.iter()
        .zip(mu)
        .zip(sigma)
        .map(|((w, m), s)| w * gaussian_bin(y, *m, s.max(SCALE_FLOOR)).0)
        .sum()
}

/// Unfloored mixture bin mass and its partials. Writes `dp/dw_k`,
/// `dp/dmu_k`, `dp/dsigma_k` into the output slices and returns `(p, dp/dy)`.
pub fn gmm_mass_grad(
    y: f64,
    w: &[f64],
    mu: &[f64],
    sigma: &[f64],
    dw: &mut [f64],
    dmu: &mut [f64],
    dsigma: &mut [f64],
) -> (f64, f64) {
    let mut p = 0.0;
    let mut dy = 0.0;
    for k in 0..w.len() {
        let s = sigma[k].max(SCALE_FLOOR);
        let (m, dm_dy, dm_ds) = gaussian_bin(y, mu[k], s);
        p += w[k] * m;
        dy += w[k] * dm_dy;
        dw[k] = m;
        dmu[k] = -w[k] * dm_dy;
        dsigma[k] = if sigma[k] < SCALE_FLOOR { 0.0 } else { w[k] * dm_ds };
    }
    (p, dy)
}

/// Probabilities of the integer symbols `lo..=hi`, where symbol `s`
/// stands for the value `s + center`; mass beyond the range is folded into
/// the two edge symbols.
pub fn gmm_support_pmf(p: &GmmParams, center: f64, lo: i32, hi: i32) -> Vec<f64> {
    if lo == hi {
        return vec![1.0];
    }
    (lo..=hi)
        .map(|s| {
            let v = s as f64 + center;
            p.weights
                .iter()
                .zip(&p.means)
                .zip(&p.scales)
                .map(|((w, m), sc)| {
                    let sc = sc.max(SCALE_FLOOR);
                    let mass = if s == lo {
                        std_cdf((v + 0.5 - m) / sc)
                    } else if s == hi {
                        std_upper_tail((v - 0.5 - m) / sc)
                    } else {
                        gaussian_bin(v, *m, sc).0
                    };
                    w * mass
                })
                .sum()
        })
        .collect()
}
