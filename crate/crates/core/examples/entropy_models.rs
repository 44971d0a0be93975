//! The two density models: the learned factorized prior over the filter's
//! latent, and the discretized Gaussian mixture of the feature codec.
//!
//! cargo run --release --example entropy_models

use ndarray::Array4;
use omni_icm::entropy_models::gaussian::{gmm_support_pmf, mean_scale_likelihood};
use omni_icm::entropy_models::{gmm_likelihood, FactorizedDensity, GmmParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let prior = FactorizedDensity::new(2, &[3, 3, 3], 10.0, &mut rng);
    let x = Array4::from_shape_fn((1, 2, 1, 5), |(_, c, _, i)| (i as f64 - 2.0) * (c + 1) as f64);
    let p = prior.likelihoods(&x);
    println!("factorized prior at initialization");
    for (v, q) in x.iter().zip(p.iter()) {
        println!("  p({v:>4}) = {q:.4}");
    }
    println!("  total {:.2} bits", prior.bits(&x));

    let mix = GmmParams::new(vec![0.6, 0.3, 0.1], vec![-1.0, 0.5, 3.0], vec![0.8, 1.5, 0.4])?;
    println!("three-component mixture, mean {:.3}", mix.mixture_mean());
    for y in -3..=4 {
        let y = y as f64;
        println!(
            "  P({y:>3}) = {:.5}   single gaussian at the mixture mean: {:.5}",
            gmm_likelihood(y, &mix),
            mean_scale_likelihood(y, mix.mixture_mean(), 1.5)
        );
    }
    let pmf = gmm_support_pmf(&mix, 0.0, -6, 6);
    println!("support pmf over -6..=6 sums to {:.12}", pmf.iter().sum::<f64>());
    Ok(())
}
