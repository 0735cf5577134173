//! Seed derivation.
//!
//! Every stochastic component draws from a `ChaCha8Rng` seeded through
//! [`derive`]. The SplitMix64 finalizer is a bijection on `u64`, so distinct
//! packed keys under the same root never collide.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed and a stream key.
pub fn derive(root: u64, key: u64) -> u64 {
    splitmix64(splitmix64(root) ^ key)
}

/// Pack up to four 16-bit indices into a single key (injective while each
/// index stays below 65536).
pub fn pack(parts: [u64; 4]) -> u64 {
    parts
        .iter()
        .fold(0u64, |acc, &p| (acc << 16) | (p & 0xFFFF))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream keys used across the crate.
pub mod stream {
    pub const DEMAND: u64 = 0xD0;
    pub const JITTER: u64 = 0xD1;
    pub const POLICY: u64 = 0xA0;
    pub const INIT: u64 = 0xA1;
    pub const OFFSETS: u64 = 0xF0;
    pub const OD: u64 = 0x0D;
}
