//! Seeded randomness. Every stream is a xoshiro256** generator whose state
//! is expanded from a 64-bit seed by splitmix64; independent streams derive
//! their seed from (seed, domain label).

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

pub type StreamRng = Xoshiro256StarStar;

/// FNV-1a over the label, folded into the seed.
fn mix(seed: u64, domain: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in domain.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed ^ h
}

pub fn keyed_rng(seed: u64, domain: &str) -> StreamRng {
    StreamRng::seed_from_u64(mix(seed, domain))
}

/// Stream for the `index`-th item of a family, e.g. one training step.
pub fn indexed_rng(seed: u64, domain: &str, index: u64) -> StreamRng {
    let base = mix(seed, domain);
    StreamRng::seed_from_u64(base.wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

/// Fisher–Yates shuffle of `0..n`.
pub fn permutation<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        p.swap(i, j);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_is_a_permutation() {
        let mut rng = keyed_rng(5, "t");
        let mut p = permutation(100, &mut rng);
        p.sort();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn domains_separate_streams() {
        let a: u64 = keyed_rng(1, "a").gen();
        let b: u64 = keyed_rng(1, "b").gen();
        assert_ne!(a, b);
        assert_eq!(a, keyed_rng(1, "a").gen::<u64>());
        assert_ne!(indexed_rng(1, "a", 0).gen::<u64>(), indexed_rng(1, "a", 1).gen::<u64>());
    }
}
