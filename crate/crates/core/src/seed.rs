//! Hierarchical seed derivation.
//!
//! Every random stream in the pipeline is keyed by `(master, tag, index)` so
//! that each component can be re-run in isolation with the same draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derive a child seed from a parent seed, a stream tag and an index.
pub fn derive(master: u64, tag: &str, index: u64) -> u64 {
    let a = splitmix64(master ^ fnv1a(tag));
    splitmix64(a ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    rng(derive(master, tag, index))
}
