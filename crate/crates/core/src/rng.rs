//! Seeded random streams. Every component draws from its own named stream of
//! one run seed, so changing e.g. the synthesis stream leaves data and
//! initialization untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Synthesis = 3,
    Shuffle = 4,
}

/// Generator for `stream` of `seed`.
pub fn stream(seed: u64, stream: Stream) -> Rng {
    substream(seed, stream, 0)
}

/// Generator for sub-index `index` of `stream` (e.g. one per synthesized batch).
pub fn substream(seed: u64, stream: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream as u64);
    rng
}
