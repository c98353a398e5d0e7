//! Seed expansion: one root seed feeds named substreams (`init`, `rollout`,
//! `distill`, `eval`), and each substream hands out counter-indexed
//! generators so batch items are reproducible regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const INIT: &str = "init";
pub const ROLLOUT: &str = "rollout";
pub const DISTILL: &str = "distill";
pub const EVAL: &str = "eval";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// A named random substream derived from a root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Substream {
    key: u64,
}

impl Substream {
    pub fn new(root: u64, name: &str) -> Self {
        Self { key: splitmix64(root ^ splitmix64(fnv1a(name))) }
    }

    /// Generator for work item `index`; distinct indices give independent streams.
    pub fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.key);
        rng.set_stream(index);
        rng
    }

    pub fn key(&self) -> u64 {
        self.key
    }
}
