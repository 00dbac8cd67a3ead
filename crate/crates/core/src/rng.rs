//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by a
//! 64-bit seed and a domain tag, so results are identical across runs and
//! platforms and independent draws never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags separating otherwise identical seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Identity = 1,
    State = 2,
    Walk = 3,
    Pair = 4,
    Train = 5,
    Init = 6,
    Sample = 7,
    Eval = 8,
    Fit = 9,
    Embedder = 10,
}

pub fn stream(seed: u64, domain: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain as u64);
    rng
}

/// Stream for the `index`-th sub-task of a seeded job (a training step,
/// an evaluation request, a fitting start).
pub fn substream(seed: u64, domain: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, index));
    rng.set_stream(domain as u64);
    rng
}

/// SplitMix64-style mixing of two words into one seed.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
