//! Weight initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::Scalar;

/// He (Kaiming) normal draws: zero mean, standard deviation `sqrt(2 / fan_in)`.
pub fn he_normal<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, len: usize) -> Vec<Scalar> {
    assert!(fan_in > 0, "fan_in must be positive");
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| normal.sample(rng) as Scalar).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn he_normal_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = he_normal(&mut rng, 50, 200_000);
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 2e-3);
        assert!((var - 2.0 / 50.0).abs() < 1e-3, "var {var}");
    }
}
