//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha::ChaCha8Rng`),
//! seeded with `seed_from_u64` and then moved onto a fixed stream id, so that
//! the consumers below never share a sequence. Turning an attack on or off never
//! shifts the numbers drawn for initialization or shuffling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent consumers of randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    /// Weight initialization.
    Init = 1,
    /// Per-epoch shuffling of the training set.
    Shuffle = 2,
    /// Train/validation split and class subsetting.
    Split = 3,
    /// Attack random starts.
    Attack = 4,
    /// Horizontal-flip augmentation.
    Augment = 5,
    /// Synthetic dataset generation.
    Synth = 6,
}

pub fn stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Sub-stream for item `index` of a keyed family (for example one image's
/// attack start in a given epoch). Independent of evaluation order, so results
/// do not depend on how work is split across threads.
pub fn keyed(seed: u64, stream: Stream, key: u64, index: u64) -> ChaCha8Rng {
    let mixed = splitmix64(splitmix64(seed ^ splitmix64(key)) ^ index);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    rng.set_stream(stream as u64);
    rng
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
