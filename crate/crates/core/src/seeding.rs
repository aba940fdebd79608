//! Deterministic seed derivation.
//!
//! Every stochastic component draws from its own ChaCha stream whose seed is
//! mixed from a base seed plus a component tag (and, where needed, an
//! instance index). There is no global RNG state anywhere in the crate, so
//! parallel and serial executions produce identical results.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// SplitMix64 finalizer; decorrelates structured seed inputs.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a component tag.
///
/// FNV-1a over the tag bytes, keyed by the finalized parent seed. Stable
/// across platforms and releases (unlike `std`'s `DefaultHasher`).
pub fn mix_tag(seed: u64, tag: &str) -> u64 {
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ splitmix64(seed);
    for &b in tag.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(h)
}

/// Derive a child seed from a parent seed and an instance index.
pub fn mix_index(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Seed for one grid cell's component: (base, condition, run, component name).
pub fn cell_seed(base: u64, cond_index: usize, run_index: usize, component: &str) -> u64 {
    mix_tag(
        mix_index(mix_index(base, cond_index as u64), run_index as u64),
        component,
    )
}

/// A reproducible RNG stream for the given derived seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `k` distinct indices from `0..n`, uniform without replacement.
///
/// Partial Fisher-Yates under our own control, so the draw sequence never
/// shifts underneath us with a `rand` upgrade.
pub fn sample_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    use rand::Rng;
    let k = k.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// In-place Fisher-Yates shuffle (same stability rationale as
/// [`sample_indices`]).
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    use rand::Rng;
    let n = items.len();
    for i in 0..n.saturating_sub(1) {
        let j = rng.random_range(i..n);
        items.swap(i, j);
    }
}
