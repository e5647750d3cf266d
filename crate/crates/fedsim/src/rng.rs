//! Deterministic seeded RNG streams.
//!
//! Every random decision in the simulator is drawn from a named stream
//! derived from the experiment's master seed. Two runs with the same seed
//! replay bit-for-bit; streams with different tags are independent, so the
//! order in which subsystems consume randomness never affects each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RNG used throughout the simulator.
pub type SimRng = ChaCha8Rng;

/// Derives an independent named stream from a master seed.
///
/// The same `(seed, tag)` pair always yields the same stream, regardless of
/// how many draws other streams have made.
pub fn stream(seed: u64, tag: &str) -> SimRng {
    let mut state = seed ^ fnv1a(tag.as_bytes());
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    SimRng::from_seed(key)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
