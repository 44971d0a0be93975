//! Probability models over quantized latents.

pub mod cdf;
pub mod factorized;
pub mod gaussian;
pub mod quantize;

pub use cdf::{tables_from_blob, tables_to_blob, CdfTable, PRECISION};
pub use factorized::FactorizedDensity;
pub use gaussian::{gmm_likelihood, mean_scale_likelihood, GmmParams, SCALE_FLOOR};
pub use quantize::QuantMode;

use crate::error::{Error, Result};

/// Smallest likelihood used inside `-log2`.
pub const LIKELIHOOD_FLOOR: f64 = 1.0 / 65536.0;

/// Total information content `sum -log2 p`.
pub fn rate_bits(likelihoods: &[f64]) -> Result<f64> {
    let mut bits = 0.0;
    for (i, &p) in likelihoods.iter().enumerate() {
        if !(p > 0.0 && p <= 1.0 + 1e-12) {
            return Err(Error::Numerical(format!("likelihood {p} at index {i} outside (0, 1]")));
        }
        bits -= p.min(1.0).log2();
    }
    Ok(bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_bits_examples() {
        assert_eq!(rate_bits(&[0.5; 7]).unwrap(), 7.0);
        assert_eq!(rate_bits(&[1.0; 3]).unwrap(), 0.0);
        assert_eq!(rate_bits(&[0.5, 0.25]).unwrap(), 3.0);
        assert!(rate_bits(&[0.0]).is_err());
        assert!(rate_bits(&[-0.1]).is_err());
    }
}
