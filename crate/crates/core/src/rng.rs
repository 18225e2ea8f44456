//! Seed derivation.
//!
//! Every random draw in a run comes from a ChaCha8 stream whose seed is a
//! deterministic function of the run seed and a path of tags (phase, epoch,
//! batch, purpose). Nothing reads global or thread-local entropy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A node in the seed tree. `child` never mutates, so the same path always
/// yields the same stream regardless of how many draws happened elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedStream {
    key: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { key: splitmix64(seed) }
    }

    pub fn child(&self, tag: u64) -> Self {
        Self {
            key: splitmix64(self.key ^ splitmix64(tag.wrapping_add(0x632b_e59b_d9b4_e019))),
        }
    }

    /// Child keyed by a string label.
    pub fn named(&self, label: &str) -> Self {
        let tag = label
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        self.child(tag)
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn rng(&self) -> Rng {
        ChaCha8Rng::seed_from_u64(self.key)
    }
}
