//! SpecAugment: zero out random frequency and time bands during training.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::frontend::mel::FeatureSequence;

#[derive(Debug, Clone)]
pub struct SpecAugmentConfig {
    /// Maximum frequency-band width in mel channels.
    pub f_mask: usize,
    /// Maximum time-band width in frames.
    pub t_mask: usize,
    pub n_freq_masks: usize,
    pub n_time_masks: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        SpecAugmentConfig {
            f_mask: 27,
            t_mask: 80,
            n_freq_masks: 1,
            n_time_masks: 1,
        }
    }
}

/// Mask `n_freq_masks` frequency bands of width ~U[0, f_mask] and
/// `n_time_masks` time bands of width ~U[0, t_mask] (clamped to the sequence
/// extent) with zeros. Deterministic given the RNG state.
pub fn spec_augment(
    features: &FeatureSequence,
    cfg: &SpecAugmentConfig,
    rng: &mut ChaCha12Rng,
) -> FeatureSequence {
    let t = features.n_frames();
    let m = features.n_mels();
    let mut out = features.clone();
    let data = out.frames_mut().data_mut();
    for _ in 0..cfg.n_freq_masks {
        let max_width = cfg.f_mask.min(m);
        let width = rng.random_range(0..=max_width);
        let start = rng.random_range(0..=m - width);
        for fi in 0..t {
            for ch in start..start + width {
                data[fi * m + ch] = 0.0;
            }
        }
    }
    for _ in 0..cfg.n_time_masks {
        let max_width = cfg.t_mask.min(t);
        let width = rng.random_range(0..=max_width);
        let start = rng.random_range(0..=t - width);
        for fi in start..start + width {
            for ch in 0..m {
                data[fi * m + ch] = 0.0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand_chacha::rand_core::SeedableRng;

    fn feats(t: usize, m: usize) -> FeatureSequence {
        FeatureSequence::new(Tensor::full(vec![t, m], 1.0f32)).unwrap()
    }

    #[test]
    fn zero_width_masks_are_identity() {
        let f = feats(20, 8);
        let cfg = SpecAugmentConfig {
            f_mask: 0,
            t_mask: 0,
            ..Default::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let out = spec_augment(&f, &cfg, &mut rng);
        assert_eq!(out, f);
    }

    #[test]
    fn masked_cell_count_is_bounded() {
        let (t, m) = (50, 16);
        let f = feats(t, m);
        let cfg = SpecAugmentConfig {
            f_mask: 5,
            t_mask: 10,
            ..Default::default()
        };
        for seed in 0..20 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let out = spec_augment(&f, &cfg, &mut rng);
            let zeros = out.frames().data().iter().filter(|&&v| v == 0.0).count();
            assert!(zeros <= cfg.f_mask * t + cfg.t_mask * m);
        }
    }

    #[test]
    fn same_seed_gives_identical_output() {
        let f = feats(30, 12);
        let cfg = SpecAugmentConfig::default();
        let a = spec_augment(&f, &cfg, &mut ChaCha12Rng::seed_from_u64(7));
        let b = spec_augment(&f, &cfg, &mut ChaCha12Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }
}
