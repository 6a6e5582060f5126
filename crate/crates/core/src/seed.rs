//! Deterministic seed derivation.
//!
//! A derived seed is a 64-bit hash of `(root, label, indices...)`: the label
//! is folded in with FNV-1a and every value passes through the SplitMix64
//! finalizer. Streams are stable across runs of the same build; matching
//! other implementations bit-for-bit is not a goal.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Label for opponent populations used in training.
pub const TRAIN_POPULATION: &str = "train-pop";
/// Label for the held-out evaluation suite.
pub const EVAL_SUITE: &str = "eval-suite";

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Uniform draw in `[0, 1)` from the top 53 bits of a hashed seed.
pub fn unit_f64(seed: u64) -> f64 {
    (mix64(seed) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedNamespace {
    root: u64,
}

impl SeedNamespace {
    pub fn new(root: u64) -> SeedNamespace {
        SeedNamespace { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn derive(&self, label: &str, indices: &[u64]) -> u64 {
        let mut h = mix64(self.root ^ mix64(fnv1a(label)));
        for &i in indices {
            h = mix64(h ^ mix64(i.wrapping_add(GOLDEN)));
        }
        h
    }

    /// Nested namespace rooted at a derived seed.
    pub fn child(&self, label: &str, indices: &[u64]) -> SeedNamespace {
        SeedNamespace::new(self.derive(label, indices))
    }

    pub fn rng(&self, label: &str, indices: &[u64]) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.derive(label, indices))
    }
}
