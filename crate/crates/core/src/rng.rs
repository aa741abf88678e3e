//! Deterministic stream derivation.
//!
//! Every stochastic consumer (a rollout, a Monte Carlo completion, an eval
//! cell) derives its own RNG from a list of integer coordinates. Results are
//! therefore independent of scheduling and worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes seed components into a single stream key.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x51_7c_c1_b7_27_22_0a_95u64;
    for (i, p) in parts.iter().enumerate() {
        h = splitmix64(h ^ p.wrapping_add(0x2545_f491_4f6c_dd1d.wrapping_mul(i as u64 + 1)));
    }
    h
}

/// A ChaCha stream keyed by `parts`.
pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// FNV-1a over token ids, salted. Used for linear-representation context
/// features; stable across platforms and runs.
pub fn context_hash(salt: u64, tokens: &[u32]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ splitmix64(salt);
    for t in tokens {
        for b in t.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derive_is_deterministic_and_order_sensitive() {
        assert_eq!(derive_seed(&[1, 2, 3]), derive_seed(&[1, 2, 3]));
        assert_ne!(derive_seed(&[1, 2, 3]), derive_seed(&[3, 2, 1]));
        assert_ne!(derive_seed(&[0]), derive_seed(&[0, 0]));
    }

    #[test]
    fn streams_reproduce() {
        let a: Vec<u64> = (0..4).map(|_| stream(&[7, 9]).next_u64()).collect();
        assert!(a.iter().all(|v| *v == a[0]));
    }

    #[test]
    fn context_hash_salt_separates() {
        assert_ne!(context_hash(1, &[4, 2]), context_hash(2, &[4, 2]));
        assert_eq!(context_hash(1, &[4, 2]), context_hash(1, &[4, 2]));
    }
}
