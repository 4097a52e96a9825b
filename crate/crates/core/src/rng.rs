//! Seeded randomness shared by every stage.
//!
//! All sampling goes through [`SplitRng`], a ChaCha8 stream seeded with
//! `rand_core`'s `seed_from_u64` expansion. The integer and shuffle routines
//! below are spelled out rather than delegated to `rand`'s helpers so that the
//! exact draw sequence is part of this crate's contract:
//!
//! * `below(n)`: draw `x = next_u64()`, reject while `x >= 2^64 - (2^64 mod n)`,
//!   return `x mod n`.
//! * `shuffle`: Fisher-Yates from the back, `for i in (1..len).rev() { swap(i, below(i + 1)) }`.
//! * `unit_f64`: `(next_u64() >> 11) * 2^-53`.
//!
//! Sub-seeds are derived with SHA-256 over the parent seed and a label path
//! (see [`derive_seed`]), so per-style or per-sample streams never overlap.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// Deterministic generator used for splits, masking, batch sampling and noise.
#[derive(Debug, Clone)]
pub struct SplitRng {
    inner: ChaCha8Rng,
}

impl SplitRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `0..n`. Panics when `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n + 1) % n;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return x % n;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }
}

/// Derives an independent seed from `base` and a path of labels.
///
/// The result is the first eight bytes (little-endian) of
/// `SHA-256(base.to_le_bytes() || 0x1f || label_0 || 0x1f || label_1 ...)`.
pub fn derive_seed(base: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for label in labels {
        h.update([0x1f]);
        h.update(label.as_bytes());
    }
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Stable 64-bit hash of arbitrary bytes (SHA-256 prefix).
pub fn hash64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn below_stays_in_range() {
        let mut rng = SplitRng::new(3);
        for n in 1..50u64 {
            for _ in 0..20 {
                assert!(rng.below(n) < n);
            }
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = SplitRng::new(11);
        let mut b = SplitRng::new(11);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut rng = SplitRng::new(5);
        let mut v: Vec<u32> = (0..100).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_ne!(derive_seed(1, &["a"]), derive_seed(1, &["b"]));
        assert_ne!(derive_seed(1, &["a", "b"]), derive_seed(1, &["ab"]));
        assert_eq!(derive_seed(9, &["x"]), derive_seed(9, &["x"]));
    }

    #[test]
    fn unit_in_half_open_interval() {
        let mut rng = SplitRng::new(0);
        for _ in 0..1000 {
            let u = rng.unit_f64();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
