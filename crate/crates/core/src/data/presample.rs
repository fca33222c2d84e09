use rand::Rng;

use crate::data::VideoRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PresampleConfig {
    /// Observation frame count.
    pub frames: usize,
    pub shift_augment: bool,
}

impl PresampleConfig {
    pub fn new(frames: usize, shift_augment: bool) -> Result<Self> {
        if frames == 0 {
            return Err(Error::contract("observation frame count must be >= 1"));
        }
        Ok(PresampleConfig {
            frames,
            shift_augment,
        })
    }
}

/// Segment-center indices `floor((i + 0.5)·N/T)` for `N >= T`, cyclic
/// tiling for `N < T`.
///
/// With `shift_augment` and an rng, a shared integer offset drawn from
/// `[0, N/T]` is added to every index; shifted indices saturate at `N-1`.
pub fn presample_indices<R: Rng + ?Sized>(
    n: usize,
    cfg: &PresampleConfig,
    rng: Option<&mut R>,
) -> Vec<usize> {
    let t = cfg.frames;
    if n < t {
        return (0..t).map(|i| i % n).collect();
    }
    let offset = match rng {
        Some(rng) if cfg.shift_augment => rng.random_range(0..=n / t),
        _ => 0,
    };
    (0..t)
        .map(|i| ((2 * i + 1) * n / (2 * t) + offset).min(n - 1))
        .collect()
}

/// Returns the record restricted to exactly `cfg.frames` frames, together
/// with the original frame index of each kept frame.
pub fn presample<R: Rng + ?Sized>(
    record: &VideoRecord,
    cfg: &PresampleConfig,
    rng: Option<&mut R>,
) -> (VideoRecord, Vec<usize>) {
    let idx = presample_indices(record.num_frames(), cfg, rng);
    (record.gather(&idx), idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const NO_RNG: Option<&mut ChaCha8Rng> = None;

    fn cfg(t: usize) -> PresampleConfig {
        PresampleConfig::new(t, false).unwrap()
    }

    #[test]
    fn short_video_repeats_and_splices() {
        assert_eq!(
            presample_indices(3, &cfg(8), NO_RNG),
            vec![0, 1, 2, 0, 1, 2, 0, 1]
        );
    }

    #[test]
    fn segment_centers() {
        assert_eq!(presample_indices(10, &cfg(5), NO_RNG), vec![1, 3, 5, 7, 9]);
        assert_eq!(presample_indices(7, &cfg(7), NO_RNG), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn zero_frames_rejected() {
        assert!(PresampleConfig::new(0, false).is_err());
    }

    #[test]
    fn shift_stays_in_range_and_ordered() {
        let c = PresampleConfig::new(16, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen_offsets = std::collections::BTreeSet::new();
        for _ in 0..50 {
            let idx = presample_indices(32, &c, Some(&mut rng));
            assert!(idx.windows(2).all(|w| w[0] <= w[1]));
            assert!(idx.iter().all(|&i| i < 32));
            seen_offsets.insert(idx[0] - 1);
        }
        assert_eq!(seen_offsets.into_iter().collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    fn tagged(n: usize) -> VideoRecord {
        let tag: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let col = |k: f64| Array::new(vec![n, 1], tag.iter().map(|v| v + k).collect()).unwrap();
        VideoRecord {
            video_id: "v".into(),
            label: 0,
            light_features: col(0.0),
            guiding_features: col(1000.0),
            recognizer_logits: col(2000.0),
            saliency_mask: Some(Array::vector((0..n).map(|i| (i % 2) as f64).collect())),
        }
    }

    proptest! {
        #[test]
        fn always_t_frames_with_aligned_channels(
            n in 1usize..80, t in 1usize..40, shift: bool, seed: u64,
        ) {
            let rec = tagged(n);
            let c = PresampleConfig::new(t, shift).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, idx) = presample(&rec, &c, Some(&mut rng));
            prop_assert_eq!(out.num_frames(), t);
            for (k, &i) in idx.iter().enumerate() {
                let tag = out.light_features.get(k, 0);
                prop_assert_eq!(tag, i as f64);
                prop_assert_eq!(out.guiding_features.get(k, 0), tag + 1000.0);
                prop_assert_eq!(out.recognizer_logits.get(k, 0), tag + 2000.0);
                prop_assert_eq!(out.saliency_mask.as_ref().unwrap().data()[k], (i % 2) as f64);
            }
        }

        #[test]
        fn unshifted_indices_nondecreasing_in_range(n in 1usize..200, t in 1usize..64) {
            prop_assume!(n >= t);
            let idx = presample_indices(n, &cfg(t), NO_RNG);
            prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(idx.iter().all(|&i| i < n));
        }
    }
}
