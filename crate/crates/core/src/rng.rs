//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by the run
//! seed and a stream label, so independent consumers never share state and
//! results do not depend on call interleaving.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn stream(seed: u64, label: &str) -> Rng {
    substream(seed, label, 0)
}

pub fn substream(seed: u64, label: &str, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label.bytes().chain(index.to_le_bytes())));
    rng
}
