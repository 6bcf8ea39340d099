//! Deterministic seed derivation and PRNG construction.
//!
//! Every stochastic component in the crate draws from a [`ChaCha8Rng`] whose
//! 64-bit seed is derived from a user-facing base seed through the splitmix64
//! mixer. Derivation is pure integer arithmetic, so identical inputs yield
//! identical streams on every platform.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep independent uses of the same derived seed decorrelated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    /// Visiting-path shuffle inside sequential simulation.
    Path = 1,
    /// Conditional Gaussian draws inside sequential simulation.
    Draw = 2,
    /// Trend azimuth selection.
    Azimuth = 3,
    /// Pair subsampling in the experimental semivariogram.
    PairSample = 4,
    /// Parameter initialization.
    Init = 5,
    /// Epoch shuffling and split assignment during training.
    Shuffle = 6,
    /// Augmentation pair sampling.
    Augment = 7,
    /// Bootstrap resampling.
    Bootstrap = 8,
    /// Dropout masks.
    Dropout = 9,
}

/// One round of the splitmix64 output function.
#[inline]
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the seed for one replicate of one setting from a base seed.
///
/// The mapping is injective in practice for dataset-sized index ranges and is
/// recorded alongside generated artifacts so any single item can be rebuilt
/// without regenerating its neighbors.
pub fn derive_seed(base_seed: u64, setting_idx: u64, replicate_idx: u64) -> u64 {
    let a = splitmix64(base_seed ^ 0xa076_1d64_78bd_642f);
    let b = splitmix64(a ^ setting_idx);
    splitmix64(b ^ replicate_idx)
}

/// Builds the PRNG for a tagged stream of a derived seed.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (stream as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}
