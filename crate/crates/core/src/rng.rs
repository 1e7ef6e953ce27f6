//! Seed derivation. Every stochastic component draws from its own ChaCha
//! stream keyed by `(root seed, name)`, so adding a consumer never shifts the
//! draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type LabRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a name (and an index, e.g. a task id) into a root seed.
pub fn sub_seed(root: u64, name: &str, index: u64) -> u64 {
    // FNV-1a over the name
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(splitmix64(root ^ h).wrapping_add(index))
}

pub fn rng_for(root: u64, name: &str, index: u64) -> LabRng {
    LabRng::seed_from_u64(sub_seed(root, name, index))
}

#[inline]
pub fn gaussian<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}
