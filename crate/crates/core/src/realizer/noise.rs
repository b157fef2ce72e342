//! Training-time corruption of concept inputs and the image blinding schedule.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingTable, SpecialToken};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseRates {
    pub mask: f64,
    /// Applied to concepts that survived masking.
    pub replace: f64,
}

impl Default for NoiseRates {
    fn default() -> Self {
        NoiseRates { mask: 0.30, replace: 0.20 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NoiseCounts {
    pub total: usize,
    pub masked: usize,
    pub replaced: usize,
}

/// Masks each concept with probability `rates.mask`, then swaps each
/// surviving concept for its nearest embedding neighbour with probability
/// `rates.replace`. List lengths never change.
pub fn inject_noise<R: Rng + ?Sized>(
    concepts: &[Vec<String>],
    rates: NoiseRates,
    words: &EmbeddingTable,
    rng: &mut R,
) -> (Vec<Vec<String>>, NoiseCounts) {
    let mask = SpecialToken::Mask.text();
    let mut counts = NoiseCounts::default();
    let out = concepts
        .iter()
        .map(|group| {
            group
                .iter()
                .map(|c| {
                    counts.total += 1;
                    if rng.gen_bool(rates.mask.clamp(0.0, 1.0)) {
                        counts.masked += 1;
                        return mask.to_string();
                    }
                    if rng.gen_bool(rates.replace.clamp(0.0, 1.0)) {
                        counts.replaced += 1;
                        if let Some(n) = words.nearest(c) {
                            return n.to_string();
                        }
                    }
                    c.clone()
                })
                .collect()
        })
        .collect();
    (out, counts)
}

/// Number of image positions blinded per sample as training progresses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlindSchedule {
    pub enabled: bool,
    pub one_from_epoch: usize,
    pub two_from_epoch: usize,
}

impl Default for BlindSchedule {
    fn default() -> Self {
        BlindSchedule {
            enabled: false,
            one_from_epoch: 50,
            two_from_epoch: 80,
        }
    }
}

impl BlindSchedule {
    pub fn count(&self, epoch: usize) -> usize {
        match () {
            _ if !self.enabled => 0,
            _ if epoch >= self.two_from_epoch => 2,
            _ if epoch >= self.one_from_epoch => 1,
            _ => 0,
        }
    }

    /// Distinct positions to blind among `n` images, in ascending order.
    pub fn positions<R: Rng + ?Sized>(&self, epoch: usize, n: usize, rng: &mut R) -> Vec<usize> {
        let k = self.count(epoch).min(n);
        let mut p = sample(rng, n, k).into_vec();
        p.sort_unstable();
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn words() -> EmbeddingTable {
        EmbeddingTable::parse("dog 1 0 0\npuppy 0.9 0.1 0\ncar 0 1 0\ntruck 0 0.9 0.1\n", "t").unwrap()
    }

    fn lists() -> Vec<Vec<String>> {
        vec![vec!["dog".into(), "car".into()], vec![], vec!["truck".into()]]
    }

    #[test]
    fn zero_rates_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, c) = inject_noise(&lists(), NoiseRates { mask: 0.0, replace: 0.0 }, &words(), &mut rng);
        assert_eq!(out, lists());
        assert_eq!(c.masked + c.replaced, 0);
    }

    #[test]
    fn full_mask_masks_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, _) = inject_noise(&lists(), NoiseRates { mask: 1.0, replace: 0.5 }, &words(), &mut rng);
        assert!(out.iter().flatten().all(|c| c == "<mask>"));
        assert_eq!(out.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 0, 1]);
    }

    #[test]
    fn replacement_uses_nearest_neighbour() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, _) = inject_noise(&lists(), NoiseRates { mask: 0.0, replace: 1.0 }, &words(), &mut rng);
        assert_eq!(out, vec![vec!["puppy".to_string(), "truck".into()], vec![], vec!["car".into()]]);
    }

    #[test]
    fn same_seed_same_noise() {
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            inject_noise(&lists(), NoiseRates::default(), &words(), &mut rng).0
        };
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn empirical_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut total = NoiseCounts::default();
        for _ in 0..10_000 {
            let (_, c) = inject_noise(&lists(), NoiseRates::default(), &words(), &mut rng);
            total.total += c.total;
            total.masked += c.masked;
            total.replaced += c.replaced;
        }
        let mask = total.masked as f64 / total.total as f64;
        let replace = total.replaced as f64 / (total.total - total.masked) as f64;
        assert!((mask - 0.30).abs() < 0.02, "{mask}");
        assert!((replace - 0.20).abs() < 0.02, "{replace}");
    }

    #[test]
    fn blinding_schedule() {
        let s = BlindSchedule {
            enabled: true,
            ..BlindSchedule::default()
        };
        assert_eq!((s.count(0), s.count(49), s.count(50), s.count(79), s.count(80)), (0, 0, 1, 1, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for e in [10, 60, 90] {
            let p = s.positions(e, 5, &mut rng);
            assert_eq!(p.len(), s.count(e));
            assert!(p.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(BlindSchedule::default().count(100), 0);
    }
}
