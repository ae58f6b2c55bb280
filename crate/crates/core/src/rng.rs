//! Seeded shuffling shared by sampling and fold assignment.
//!
//! The generator is ChaCha8 seeded through `SeedableRng::seed_from_u64`.
//! Shuffling is Fisher-Yates from the last index down, drawing each swap
//! index with [`uniform_below`]. Together these fix the permutation for a
//! given seed independently of the `rand` crate's distribution code.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform integer in `[0, n)` by rejection: draws below `2^64 mod n` are
/// discarded so the accepted range is a multiple of `n`.
pub fn uniform_below(rng: &mut impl RngCore, n: u64) -> u64 {
    assert!(n > 0, "empty range");
    let threshold = n.wrapping_neg() % n;
    loop {
        let x = rng.next_u64();
        if x >= threshold {
            return x % n;
        }
    }
}

pub fn shuffle<T>(items: &mut [T], seed: u64) {
    let mut rng = seeded(seed);
    for i in (1..items.len()).rev() {
        let j = uniform_below(&mut rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}
