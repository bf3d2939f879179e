//! Seeded, splittable randomness.
//!
//! One run seed fans out into independent named streams, so adding draws in
//! one component never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A child stream keyed by `label`.
    pub fn split(&self, label: &str) -> SeedStream {
        SeedStream::new(splitmix64(self.seed ^ fnv1a(label)))
    }

    /// A child stream keyed by `label` and an index (task, category, ...).
    pub fn split_indexed(&self, label: &str, index: u64) -> SeedStream {
        SeedStream::new(splitmix64(self.split(label).seed.wrapping_add(splitmix64(index))))
    }

    pub fn rng(&self, label: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.split(label).seed)
    }
}
