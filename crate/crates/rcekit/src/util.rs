//! Seed plumbing shared across stages.
//!
//! Every stochastic stage derives its own RNG from one master seed and a
//! stage label, so a whole experiment is reproducible from a single seed
//! while stages stay statistically independent.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// FNV-1a over the label bytes; fixed constants, never changes.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// splitmix64 finalizer; decorrelates nearby seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives the sub-seed for a named stage from the master seed.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    splitmix64(master ^ fnv1a(stage.as_bytes()))
}

/// Seeded RNG for a named stage.
pub fn stage_rng(master: u64, stage: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(stage_seed(master, stage))
}

/// q-th percentile with linear interpolation over a non-empty sample.
/// q = 0 maps to negative infinity so that every sample point strictly
/// exceeds the returned value.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty sample");
    if q == 0.0 {
        return f64::NEG_INFINITY;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN scores"));
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = rank - lo as f64;
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_differ_by_label() {
        assert_ne!(stage_seed(7, "train"), stage_seed(7, "attack"));
        assert_eq!(stage_seed(7, "train"), stage_seed(7, "train"));
    }

    #[test]
    fn median_of_three() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0), 2.0);
    }

    #[test]
    fn zero_percentile_is_below_everything() {
        let t = percentile(&[0.5, 0.1], 0.0);
        assert!(t < 0.1);
    }

    #[test]
    fn interpolates_between_order_statistics() {
        // rank = 0.25 * 3 = 0.75 between 1 and 2
        assert!((percentile(&[1.0, 2.0, 3.0, 4.0], 25.0) - 1.75).abs() < 1e-12);
    }
}
