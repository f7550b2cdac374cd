//! Counter-based seed derivation.
//!
//! Every random draw in a simulation comes from a stream addressed by a path
//! of tags (episode, agent, hour, purpose). Adding an agent or an hour never
//! shifts the draws of any other stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedStream(u64);

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream(splitmix64(seed))
    }

    pub fn child(self, tag: u64) -> Self {
        SeedStream(splitmix64(self.0 ^ splitmix64(tag.wrapping_mul(GOLDEN) ^ 0xA5A5_A5A5)))
    }

    pub fn path(self, tags: &[u64]) -> Self {
        tags.iter().fold(self, |s, &t| s.child(t))
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    pub fn value(self) -> u64 {
        self.0
    }
}

/// Stream purposes, used as the last tag of a path.
pub mod purpose {
    pub const LOAD: u64 = 1;
    pub const PV: u64 = 2;
    pub const DISRUPTION: u64 = 3;
    pub const OBSERVATION: u64 = 4;
    pub const POLICY: u64 = 5;
    pub const INIT: u64 = 6;
    pub const SHUFFLE: u64 = 7;
    pub const EPISODE: u64 = 8;
}

/// Scenario seed for episode `episode` of a run seeded with `seed`.
pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    SeedStream::new(seed).path(&[purpose::EPISODE, episode as u64]).value()
}
