//! Seeded randomness.
//!
//! Every stochastic step in the stack (weight init, dropout masks, dataset
//! shuffles, synthetic glyph jitter) draws from [`SeededRng`], which is the
//! ChaCha stream cipher with 8 rounds. ChaCha is counter-based and its output
//! is specified independently of the host, so a seed reproduces the same
//! stream on every platform.
//!
//! Sub-streams are derived with [`derive_seed`] (SplitMix64 finalizer mixing)
//! so that e.g. the shuffle of epoch 7 does not depend on how many dropout
//! masks were drawn in epochs 1 through 6.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of stream identifiers.
pub fn derive_seed(seed: u64, stream: &[u64]) -> u64 {
    stream
        .iter()
        .fold(splitmix64(seed), |acc, &s| splitmix64(acc ^ splitmix64(s)))
}

/// Stream tags used by the training pipeline.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const SYNTH: u64 = 5;
}
