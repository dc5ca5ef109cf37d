use rand::Rng;

use super::Real;

/// He-uniform weights for ReLU layers: `U(-√(6/fan_in), √(6/fan_in))`.
pub fn he_uniform<F: Real, R: Rng>(fan_in: usize, n: usize, rng: &mut R) -> Vec<F> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| F::lit(rng.gen_range(-bound..bound))).collect()
}

/// Plain fan-in scaling `U(-1/√fan_in, 1/√fan_in)`, used for the embedding head
/// (weights and biases alike, at build time and on reset).
pub fn fan_in_uniform<F: Real, R: Rng>(fan_in: usize, n: usize, rng: &mut R) -> Vec<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| F::lit(rng.gen_range(-bound..bound))).collect()
}
