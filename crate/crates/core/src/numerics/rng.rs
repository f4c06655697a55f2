use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seeded random stream with cheap, collision-resistant substream derivation.
///
/// Substreams are derived purely from `(seed, tags)`, never from consumed
/// state, so any component can re-derive its stream after a checkpoint
/// restore without the checkpoint having to serialize generator internals.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent stream identified by `tags`.
    ///
    /// Different tag sequences map to different ChaCha stream numbers under
    /// the same key, so substreams never overlap with each other or with the
    /// parent. Deterministic: same `(seed, tags)` always yields the same
    /// stream, regardless of how much the parent has been consumed.
    pub fn substream(&self, tags: &[u64]) -> RngStream {
        let mut h = self.seed ^ 0x9e37_79b9_7f4a_7c15;
        for &t in tags {
            h = splitmix64(h ^ t);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(h);
        RngStream { seed: self.seed, rng }
    }

    /// Uniform draw in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        // 53 random bits scaled into [0, 1).
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Samples an index from an unnormalized weight vector.
    ///
    /// Weights must be non-negative, finite, and sum to something positive.
    /// Uses a single uniform draw and a left-to-right cumulative scan; ties
    /// and rounding resolve toward the lowest index.
    pub fn sample_categorical(&mut self, weights: &[f64]) -> Result<usize> {
        let mut total = 0.0;
        for &w in weights {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidDistribution(format!(
                    "categorical weight {w} is negative or non-finite"
                )));
            }
            total += w;
        }
        if total <= 0.0 {
            return Err(Error::InvalidDistribution(
                "categorical weights sum to zero".into(),
            ));
        }
        let u = self.next_f64() * total;
        let mut cum = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            cum += w;
            if u < cum {
                return Ok(i);
            }
        }
        // Rounding pushed u past the final cumulative sum; return the last
        // index with positive mass.
        Ok(weights
            .iter()
            .rposition(|&w| w > 0.0)
            .expect("total > 0 implies a positive weight"))
    }

    /// Standard normal draw.
    pub fn next_standard_normal(&mut self) -> f64 {
        use rand_distr::{Distribution, StandardNormal};
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut self.rng)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
}

/// SplitMix64 finalizer; good avalanche, cheap, stable across platforms.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_diverge() {
        let mut a = RngStream::new(1);
        let mut b = RngStream::new(2);
        let same = (0..100).filter(|_| a.next_u64() == b.next_u64()).count();
        assert!(same < 3);
    }

    #[test]
    fn substream_is_independent_of_parent_consumption() {
        let parent = RngStream::new(7);
        let mut fresh = parent.substream(&[1, 2]);

        let mut consumed_parent = RngStream::new(7);
        for _ in 0..1000 {
            consumed_parent.next_u64();
        }
        let mut after = consumed_parent.substream(&[1, 2]);

        for _ in 0..50 {
            assert_eq!(fresh.next_u64(), after.next_u64());
        }
    }

    #[test]
    fn different_tags_different_streams() {
        let root = RngStream::new(3);
        let mut a = root.substream(&[0]);
        let mut b = root.substream(&[1]);
        let mut c = root.substream(&[0, 0]);
        let xs: Vec<u64> = (0..20).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..20).map(|_| b.next_u64()).collect();
        let zs: Vec<u64> = (0..20).map(|_| c.next_u64()).collect();
        assert_ne!(xs, ys);
        assert_ne!(xs, zs);
        assert_ne!(ys, zs);
    }

    #[test]
    fn uniform_f64_in_unit_interval() {
        let mut r = RngStream::new(11);
        for _ in 0..10_000 {
            let u = r.next_f64();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn categorical_point_mass_always_wins() {
        let mut r = RngStream::new(5);
        for _ in 0..1000 {
            assert_eq!(r.sample_categorical(&[1.0, 0.0, 0.0]).unwrap(), 0);
            assert_eq!(r.sample_categorical(&[0.0, 0.0, 2.5]).unwrap(), 2);
        }
    }

    #[test]
    fn categorical_frequencies_match_weights() {
        let mut r = RngStream::new(9);
        let n = 100_000;
        let mut ones = 0usize;
        for _ in 0..n {
            if r.sample_categorical(&[0.5, 0.5]).unwrap() == 1 {
                ones += 1;
            }
        }
        let f = ones as f64 / n as f64;
        assert!((0.49..=0.51).contains(&f), "frequency {f} outside [0.49, 0.51]");
    }

    #[test]
    fn categorical_rejects_bad_weights() {
        let mut r = RngStream::new(1);
        assert!(r.sample_categorical(&[0.0, 0.0]).is_err());
        assert!(r.sample_categorical(&[-1.0, 2.0]).is_err());
        assert!(r.sample_categorical(&[f64::NAN, 1.0]).is_err());
    }
}
