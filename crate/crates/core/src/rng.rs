//! Seeded random streams. Every consumer derives its own stream from the
//! run seed and a name, so adding draws in one component never shifts
//! another's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Seed of the sub-stream `name` of `seed`.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h = splitmix(seed);
    for b in name.bytes() {
        h = splitmix(h ^ b as u64);
    }
    h
}

pub fn stream(seed: u64, name: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, name))
}
