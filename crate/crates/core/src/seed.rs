//! Deterministic seed derivation.
//!
//! Every random stream in a run is keyed by the master seed plus a tuple of
//! small integers (round, client, purpose), so any stream can be rebuilt in
//! isolation without replaying earlier ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes mixed into derived seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Partition = 2,
    UnlearnSelect = 3,
    ModelInit = 4,
    UnlearnInit = 5,
    Learn = 6,
    Relabel = 7,
    Unlearn = 8,
    Placement = 9,
    ClientPick = 10,
    TestSplit = 11,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a base seed and a sequence of integer tags into a new seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Seed for round-scoped client work: `hash(master, round, client, stream)`.
pub fn round_seed(master: u64, round: usize, client: usize, stream: Stream) -> u64 {
    derive_seed(master, &[round as u64, client as u64, stream as u64])
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
