use rand::Rng;

/// How continuous latents are discretized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive `U(-1/2, 1/2)` noise (training-time relaxation).
    Noise,
    /// Nearest integer, ties away from zero.
    Round,
}

/// Nearest integer with ties away from zero.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Adds i.i.d. uniform noise in `[-0.5, 0.5)` to every element.
pub fn add_uniform_noise<R: Rng + ?Sized>(values: &mut [f64], rng: &mut R) {
    for v in values {
        *v += rng.random_range(-0.5..0.5);
    }
}

/// Rounds `values` in place, centered on `means` when given
/// (`round(y - mu) + mu`).
pub fn round_centered(values: &mut [f64], means: Option<&[f64]>) {
    match means {
        None => values.iter_mut().for_each(|v| *v = round_half_away(*v)),
        Some(mu) => {
            assert_eq!(mu.len(), values.len());
            for (v, &m) in values.iter_mut().zip(mu) {
                *v = round_half_away(*v - m) + m;
            }
        }
    }
}

/// Integer symbols `round(y - mu)` for entropy coding.
pub fn symbols(values: &[f64], means: Option<&[f64]>) -> Vec<i32> {
    match means {
        None => values.iter().map(|&v| round_half_away(v) as i32).collect(),
        Some(mu) => values
            .iter()
            .zip(mu)
            .map(|(&v, &m)| round_half_away(v - m) as i32)
            .collect(),
    }
}

/// Applies a quantization mode; `means` only affects [`QuantMode::Round`].
pub fn quantize<R: Rng + ?Sized>(values: &[f64], mode: QuantMode, means: Option<&[f64]>, rng: &mut R) -> Vec<f64> {
    let mut out = values.to_vec();
    match mode {
        QuantMode::Noise => add_uniform_noise(&mut out, rng),
        QuantMode::Round => round_centered(&mut out, means),
    }
    out
}
