//! Seed derivation and the generator used by every stochastic stage.
//!
//! All randomness flows from a single 64-bit global seed. Each pipeline stage
//! gets its own stream:
//!
//! ```text
//! stage_seed = global_seed XOR (stage_index * 0x9E37_79B9_7F4A_7C15)   (wrapping)
//! ```
//!
//! and the stream itself is SplitMix64 (state += 0x9E3779B97F4A7C15, then the
//! standard xor-shift-multiply finalizer), so the same structure can be
//! reproduced from any language. Stage 0 is the global seed itself.
//!
//! The initial state is the finalizer applied to the seed, not the seed
//! itself: the stage multiplier equals the SplitMix increment, so unmixed
//! seeds `s` and `s ^ γ` would give nearly overlapping streams.

use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

/// The generator type used throughout the crate.
pub type LabRng = SplitMix64;

/// Odd multiplier (the 64-bit golden ratio) used to spread stage indices.
pub const STAGE_MULTIPLIER: u64 = 0x9E37_79B9_7F4A_7C15;

/// Derives the sub-seed for `stage` from `seed`.
pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    seed ^ stage.wrapping_mul(STAGE_MULTIPLIER)
}

/// SplitMix64 output finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 stream whose initial state is `mix64(seed)`.
pub fn rng_from_seed(seed: u64) -> LabRng {
    SplitMix64::from_seed(mix64(seed).to_le_bytes())
}

/// Convenience: `rng_from_seed(stage_seed(seed, stage))`.
pub fn stage_rng(seed: u64, stage: u64) -> LabRng {
    rng_from_seed(stage_seed(seed, stage))
}
