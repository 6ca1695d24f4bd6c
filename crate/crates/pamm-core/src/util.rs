//! Deterministic hashing, seeding, and number-formatting helpers shared
//! across the crate. Everything here must be stable across platforms and
//! runs: splits, random-bucket assignment, and config hashes all key off it.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a 64-bit over raw bytes. Used for id-based splits and config hashes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// SplitMix64 finalizer; good avalanche for combining small integer keys.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Combine a seed with a sequence of keys into one well-mixed 64-bit value.
pub fn mix64(seed: u64, keys: &[u64]) -> u64 {
    let mut acc = splitmix64(seed);
    for &k in keys {
        acc = splitmix64(acc ^ splitmix64(k));
    }
    acc
}

/// Deterministic ChaCha8 stream from a seed and a name. Keying by name keeps
/// per-tensor initialization independent of allocation order, so two variants
/// sharing a parameter draw identical values for it.
pub fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    let key = mix64(seed, &[fnv1a64(name.as_bytes())]);
    ChaCha8Rng::seed_from_u64(key)
}

/// Format a float with 17 significant digits, enough to round-trip any f64
/// exactly through text.
pub fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}

/// Parse a float written by [`fmt_f64`] (or any standard float literal).
pub fn parse_f64(s: &str) -> Option<f64> {
    s.parse::<f64>().ok()
}

/// Seeded Fisher-Yates permutation of `0..n`.
pub fn seeded_permutation(seed: u64, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut state = splitmix64(seed);
    for i in (1..n).rev() {
        state = splitmix64(state);
        let j = (state % (i as u64 + 1)) as usize;
        perm.swap(i, j);
    }
    perm
}
