//! Deterministic random sources.
//!
//! One global seed fans out into independent substreams keyed by a purpose tag
//! and an index (usually the iteration counter), so any iteration can be
//! replayed from the seed alone.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::nets::Real;

pub type Rng = ChaCha8Rng;

/// Purpose tags for substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Batch = 2,
    Sampling = 3,
    Pairs = 4,
    VaeDescriptor = 5,
    VaeGenerator = 6,
    Split = 7,
    Probe = 8,
    Synthetic = 9,
}

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn substream(seed: u64, stream: Stream, index: u64) -> Rng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(seed) ^ splitmix64((stream as u64) << 32) ^ splitmix64(index.wrapping_mul(0x2545_f491_4f6c_dd1d));
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Spawns an independent generator from a parent stream.
pub fn fork(rng: &mut Rng) -> Rng {
    ChaCha8Rng::seed_from_u64(rng.random::<u64>())
}

pub fn gaussian<F: Real>(rng: &mut Rng) -> F {
    F::of(rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_vec<F: Real>(rng: &mut Rng, n: usize) -> Vec<F> {
    (0..n).map(|_| gaussian(rng)).collect()
}
