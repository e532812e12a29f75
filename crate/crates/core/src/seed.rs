//! Named random streams derived from one user seed.
//!
//! Every consumer of randomness draws from its own ChaCha8 stream keyed by
//! `(seed, stream, index)`, so runs are reproducible without global state
//! and adding draws to one stream never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Split = 2,
    LineMask = 3,
    SquareMask = 4,
    Shuffle = 5,
    Synth = 6,
}

pub fn rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
