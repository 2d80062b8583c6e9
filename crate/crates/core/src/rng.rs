//! Per-sample random streams and inverse-CDF normal draws.
//!
//! Sample `k` always reads stream `k` of a ChaCha generator keyed by the
//! seed, so results do not depend on thread scheduling.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use statrs::distribution::{ContinuousCDF, Normal};

pub(crate) fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform on the open interval `(0, 1)`.
pub(crate) fn open_uniform(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

pub(crate) fn standard_normal(rng: &mut impl RngCore) -> f64 {
    thread_local! {
        static STD: Normal = Normal::new(0.0, 1.0).expect("unit normal");
    }
    let u = open_uniform(rng);
    STD.with(|n| n.inverse_cdf(u))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_independent_of_order() {
        let a: Vec<f64> = (0..4).map(|k| standard_normal(&mut sample_rng(3, k))).collect();
        let b: Vec<f64> = (0..4).rev().map(|k| standard_normal(&mut sample_rng(3, k))).collect();
        assert_eq!(a, b.into_iter().rev().collect::<Vec<_>>());
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn normal_moments() {
        let mut rng = sample_rng(11, 0);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let kurt = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n as f64 / (var * var);
        assert!(mean.abs() < 5.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.01);
        assert!((kurt - 3.0).abs() < 0.05);
        let u = open_uniform(&mut rng);
        assert!(u > 0.0 && u < 1.0);
    }
}
