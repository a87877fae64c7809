//! Counter-based random streams.
//!
//! Every draw in a run comes from a generator keyed by
//! `(master seed, subsystem, node, counter)`. Nothing carries generator
//! state between ticks, so adding nodes never perturbs existing streams and
//! checkpoints need no RNG state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Subsystems owning an independent family of streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Subsystem {
    Init = 1,
    Partition = 2,
    Prototypes = 3,
    Data = 4,
    TestSet = 5,
    Probe = 6,
    Validation = 7,
    Mobility = 8,
    Link = 9,
    Replay = 10,
    Dropout = 11,
    Adversary = 12,
    Relay = 13,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for one `(subsystem, node, counter)` cell of a run.
pub fn stream(master: u64, subsystem: Subsystem, node: u64, counter: u64) -> ChaCha8Rng {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ subsystem as u64);
    h = splitmix64(h ^ node);
    h = splitmix64(h ^ counter);
    let mut seed = [0u8; 32];
    let mut word = h;
    for chunk in seed.chunks_mut(8) {
        word = splitmix64(word);
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// A single derived seed, for APIs that take a plain `u64`.
pub fn derive(master: u64, subsystem: Subsystem, node: u64) -> u64 {
    stream(master, subsystem, node, u64::MAX).random()
}
