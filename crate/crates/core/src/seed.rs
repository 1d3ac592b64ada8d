//! Stable seed derivation. Every random draw in a run descends from one
//! configured seed through these functions.

/// One SplitMix64 output step.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `(base, index)` into an independent child seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// Seed for round `round` (0-based) of a run seeded with `seed`.
pub fn round_seed(seed: u64, round: usize) -> u64 {
    derive_seed(derive_seed(seed, 0x72_6f75_6e64), round as u64)
}

/// Seed of the `i`-th sample in a partition experiment.
pub fn partition_seed(seed: u64, i: usize) -> u64 {
    derive_seed(derive_seed(seed, 0x7061_7274), i as u64)
}
