//! Seeded random streams shared by data generation, weight initialization
//! and shuffling.
//!
//! The generator is xoshiro256++ whose 256-bit state is filled from a 64-bit
//! seed by four successive SplitMix64 outputs (the standard
//! `seed_from_u64` of the `rand_xoshiro` crate). Everything drawn from it is
//! derived with the fixed recipes below so that other implementations can
//! reproduce the same streams:
//!
//! * `uniform()`: `(next_u64 >> 11) * 2^-53`, a value in `[0, 1)`.
//! * `range(lo, hi)`: `lo + (hi - lo) * uniform()`.
//! * `below(n)`: `(next_u64 as u128 * n as u128) >> 64`.
//! * `normal()`: Box-Muller on two uniforms `u1, u2`, returning
//!   `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`; the sine branch is discarded.
//! * `derive_seed(seed, stream)`: the SplitMix64 finalizer applied to
//!   `seed + (stream + 1) * 0x9E3779B97F4A7C15` (wrapping), used to give
//!   every item / phase / epoch an independent stream.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix_finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for an independent sub-stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix_finalize(seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

pub struct Rng64 {
    inner: Xoshiro256PlusPlus,
}

impl Rng64 {
    pub fn new(seed: u64) -> Self {
        Rng64 {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: u64) -> u64 {
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates from the back, swapping `i` with `below(i + 1)`.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
