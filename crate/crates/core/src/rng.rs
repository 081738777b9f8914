//! Counter-based RNG streams. Every consumer derives its own stream from a
//! root seed and an index, so results never depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream `index` of the generator rooted at `seed`.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Stream for a pair of indices (e.g. epoch and sample).
pub fn substream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    stream(seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15), b)
}
