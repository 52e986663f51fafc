//! Seeded randomness.
//!
//! Every stochastic step in the crate draws from [`Rng`], which is ChaCha8
//! (`rand_chacha::ChaCha8Rng`): a portable, documented stream cipher
//! generator whose output is identical on every platform for a given seed.
//! Independent streams are derived from a parent seed and a stream tag with
//! a SplitMix64 finalizer, so that e.g. the sample drawn for prompt 17 of
//! iteration 3 does not depend on how many draws other prompts made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand::Rng as RngExt;
pub use rand::seq::SliceRandom;

/// The crate-wide generator.
pub type Rng = ChaCha8Rng;

/// Builds a generator from a 64-bit seed.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of an independent sub-stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Same as [`derive_seed`] with a textual stream tag.
pub fn derive_seed_str(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    derive_seed(seed, h)
}
