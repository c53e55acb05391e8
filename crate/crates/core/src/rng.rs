//! Seeded generators. Every stochastic step takes an explicit generator built
//! here so that runs are reproducible from a single integer seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer; used to derive independent child seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a stream index.
pub fn derive(parent: u64, stream: u64) -> u64 {
    mix(parent ^ mix(stream.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Derives a child seed from a parent seed and a string label.
pub fn derive_str(parent: u64, label: &str) -> u64 {
    // FNV-1a over the label bytes
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    derive(parent, h)
}
