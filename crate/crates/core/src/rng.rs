//! Named, splittable random streams.
//!
//! Every consumer of randomness (environment noise, draft sampling, server
//! verification, random-mode coin, shadow verification) draws from its own
//! stream derived from `(root seed, label, keys...)`. Streams never share
//! state, so adding a consumer does not perturb the others and device and
//! harness replays stay bit-reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream labels. The numeric values are part of the replay contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Codebooks = 1,
    HeadPerturbation = 2,
    EnvReset = 3,
    EnvNoise = 4,
    Draft = 5,
    Target = 6,
    Verify = 7,
    Coin = 8,
    Shadow = 9,
    Delay = 10,
    Fixture = 11,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a root seed, a stream label and any number of keys into one 64-bit seed.
pub fn derive_seed(root: u64, stream: Stream, keys: &[u64]) -> u64 {
    let mut h = splitmix64(root ^ 0xA0A1_A2A3_A4A5_A6A7);
    h = splitmix64(h ^ stream as u64);
    for &k in keys {
        h = splitmix64(h ^ k);
    }
    h
}

pub fn stream(root: u64, stream: Stream, keys: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(root, stream, keys))
}
