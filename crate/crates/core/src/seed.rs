//! Derivation of independent generator states from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purposes a master seed fans out to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Sampling = 2,
    Synthetic = 3,
    Protocol = 4,
    Teacher = 5,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix `seed` with a purpose and any number of indices into a new seed.
pub fn derive(seed: u64, stream: Stream, indices: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ splitmix(stream as u64));
    for &i in indices {
        h = splitmix(h ^ splitmix(i.wrapping_add(0x5851_f42d_4c95_7f2d)));
    }
    h
}

pub fn rng(seed: u64, stream: Stream, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, indices))
}
