//! Named, order-independent random streams.
//!
//! Every consumer of randomness derives its own generator from the run seed plus
//! a tuple of integer keys (stage, iteration, frame, pixel, ...). Parallel
//! evaluation order therefore never changes results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream generator type used throughout the crate.
pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a generator for the stream identified by `keys` under `seed`.
pub fn stream(seed: u64, keys: &[u64]) -> StreamRng {
    let mut state = splitmix64(seed);
    for &k in keys {
        state = splitmix64(state ^ splitmix64(k.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    let mut bytes = [0u8; 32];
    let mut s = state;
    for chunk in bytes.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Stream tags keep unrelated consumers from sharing a key tuple.
pub mod tag {
    pub const INIT_STATIC: u64 = 1;
    pub const INIT_DYNAMIC: u64 = 2;
    pub const RAY_BATCH: u64 = 10;
    pub const RAY_JITTER: u64 = 11;
    pub const PATCH: u64 = 12;
    pub const NOVEL_VIEW: u64 = 13;
    pub const KEYPOINTS: u64 = 20;
}
