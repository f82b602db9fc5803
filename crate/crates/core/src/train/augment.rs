use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Per-sample probability of a horizontal flip; only used for
    /// `[N, C, H, W]` batches.
    pub flip_prob: f64,
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip_prob: 0.5, noise_std: 0.01 }
    }
}

impl AugmentConfig {
    pub const IDENTITY: Self = Self { flip_prob: 0.0, noise_std: 0.0 };
}

/// Mirrors every image of sample `i` along its width axis.
fn flip_sample(data: &mut [f64], width: usize) {
    for row in data.chunks_mut(width) {
        row.reverse();
    }
}

/// Random horizontal flips (image batches only) followed by additive
/// Gaussian noise. Draws nothing from `rng` for disabled steps.
pub fn augment<R: Rng + ?Sized>(batch: &Tensor, rng: &mut R, cfg: &AugmentConfig) -> Tensor {
    let mut out = batch.select_rows(&(0..batch.shape()[0]).collect::<Vec<_>>());
    let shape = batch.shape().to_vec();
    if shape.len() == 4 && cfg.flip_prob > 0.0 {
        let stride: usize = shape[1..].iter().product();
        for sample in out.data_mut().chunks_mut(stride) {
            if rng.random_bool(cfg.flip_prob.min(1.0)) {
                flip_sample(sample, shape[3]);
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).expect("positive std");
        out.data_mut().iter_mut().for_each(|x| *x += normal.sample(rng));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn images() -> Tensor {
        Tensor::new(vec![3, 1, 2, 3], (0..18).map(f64::from).collect()).unwrap()
    }

    #[test]
    fn identity_when_disabled() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = images();
        assert_eq!(augment(&x, &mut rng, &AugmentConfig::IDENTITY).data(), x.data());
    }

    #[test]
    fn forced_flip_is_an_involution() {
        let cfg = AugmentConfig { flip_prob: 1.0, noise_std: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = images();
        let once = augment(&x, &mut rng, &cfg);
        assert_eq!(&once.data()[..3], &[2.0, 1.0, 0.0]);
        assert_eq!(augment(&once, &mut rng, &cfg).data(), x.data());
    }

    #[test]
    fn features_are_never_flipped() {
        let cfg = AugmentConfig { flip_prob: 1.0, noise_std: 0.0 };
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(augment(&x, &mut ChaCha8Rng::seed_from_u64(2), &cfg).data(), x.data());
    }

    #[test]
    fn noise_stays_small() {
        let cfg = AugmentConfig { flip_prob: 0.0, noise_std: 0.01 };
        let x = Tensor::zeros(vec![100, 50]);
        let y = augment(&x, &mut ChaCha8Rng::seed_from_u64(3), &cfg);
        let max = y.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max > 0.0 && max < 0.1, "{max}");
    }

    #[test]
    fn deterministic_given_rng_state() {
        let cfg = AugmentConfig::default();
        let a = augment(&images(), &mut ChaCha8Rng::seed_from_u64(4), &cfg);
        let b = augment(&images(), &mut ChaCha8Rng::seed_from_u64(4), &cfg);
        assert_eq!(a, b);
    }
}
