//! Seed derivation.
//!
//! One master seed fans out into independent ChaCha8 substreams keyed by
//! `(image index, category index, purpose)`. A substream depends only on its
//! key, so the order in which work is scheduled never changes a draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a substream is used for. The tag is part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Perturb,
    World,
    Snapshot,
    Harness,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Perturb => 0x7065_7274,
            Purpose::World => 0x776f_726c,
            Purpose::Snapshot => 0x736e_6170,
            Purpose::Harness => 0x6861_726e,
        }
    }
}

/// Category slot used for substreams that are not tied to a category.
pub const NO_CATEGORY: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    master: u64,
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn substream(&self, image: u64, category: u64, purpose: Purpose) -> Substream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        let key = mix(mix(mix(purpose.tag()) ^ image) ^ category.rotate_left(17));
        rng.set_stream(key);
        Substream { rng }
    }
}

/// A value-owned random stream. Cloning forks an identical copy.
#[derive(Debug, Clone)]
pub struct Substream {
    rng: ChaCha8Rng,
}

impl Substream {
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
