//! Deterministic RNG substreams.
//!
//! Every random decision in a round draws from its own stream keyed by
//! `(run seed, round, purpose)`, so changing how much one component consumes
//! never shifts another component's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Draft = 1,
    Uncertainty = 2,
    Skip = 3,
    Channel = 4,
    Verify = 5,
    OraclePermutation = 6,
    OracleNoiseSlm = 7,
    OracleNoiseLlm = 8,
    OracleSharpness = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, key: u64, stream: Stream) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(key)) ^ (stream as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn substream(seed: u64, key: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, key, stream))
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a, stable across platforms and releases.
pub fn fnv1a(bytes: &[u8], state: u64) -> u64 {
    bytes
        .iter()
        .fold(state, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub fn fnv1a_start() -> u64 {
    FNV_OFFSET
}
