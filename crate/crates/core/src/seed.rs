//! Deterministic seed derivation.
//!
//! All randomness in the crate flows from explicit `u64` seeds; child seeds
//! are derived by mixing a parent with a tag so that independent consumers
//! (augmentation views, dropout masks, masking) never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer over `parent` and `tag`.
pub fn derive(parent: u64, tag: u64) -> u64 {
    let mut z = parent ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive2(parent: u64, a: u64, b: u64) -> u64 {
    derive(derive(parent, a), b)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags used when deriving child seeds.
pub mod tag {
    pub const VIEW_A: u64 = 0xA1;
    pub const VIEW_B: u64 = 0xB2;
    pub const SYNONYM: u64 = 0x53;
    pub const ONLINE_DROPOUT: u64 = 0xD0;
    pub const MOMENTUM_DROPOUT: u64 = 0xD1;
    pub const MLM: u64 = 0x4D;
    pub const ITM: u64 = 0x17;
    pub const SHUFFLE: u64 = 0x5F;
    pub const AUGMENT: u64 = 0xAA;
    pub const INIT: u64 = 0x1A;
    pub const QUEUE_INIT: u64 = 0x0E;
}
