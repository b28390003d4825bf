//! Independent deterministic random streams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub(crate) enum Purpose {
    Shuffle = 1,
    SourceDropout = 2,
    TargetDropout = 3,
    Split = 4,
    Synthetic = 5,
}

/// Generator keyed by `(seed, purpose)` on stream `index`.
pub(crate) fn stream_rng(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let key = seed ^ (purpose as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}
