//! Deterministic point sets.
//!
//! Sampling-based estimates in this crate use a randomly shifted Halton
//! sequence: point `i` depends only on `(seed, i)`, so any prefix of the
//! sequence is a subset of a longer one and work can be split by index.

use nalgebra::SVector;

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// SplitMix64 finalizer, used to derive per-seed shifts.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maps a `u64` to `[0, 1)` using its top 53 bits.
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// Seeded Halton sequence in the unit cube `[0, 1)^N`.
#[derive(Debug, Clone)]
pub struct Halton<const N: usize> {
    shift: [f64; N],
}

impl<const N: usize> Halton<N> {
    pub fn new(seed: u64) -> Self {
        assert!(N <= PRIMES.len(), "Halton sequence supports at most 16 dimensions");
        let mut shift = [0.0; N];
        let mut z = seed;
        for s in shift.iter_mut() {
            z = splitmix64(z);
            *s = unit_f64(z);
        }
        Self { shift }
    }

    pub fn point(&self, index: u64) -> SVector<f64, N> {
        SVector::from_fn(|d, _| {
            let v = radical_inverse(index + 1, PRIMES[d]) + self.shift[d];
            if v >= 1.0 {
                v - 1.0
            } else {
                v
            }
        })
    }
}

/// Axis-aligned box `[lo, hi]` in `N` dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisBox<const N: usize> {
    pub lo: SVector<f64, N>,
    pub hi: SVector<f64, N>,
}

impl<const N: usize> AxisBox<N> {
    pub fn new(lo: SVector<f64, N>, hi: SVector<f64, N>) -> Self {
        Self { lo, hi }
    }

    /// Every side has positive length.
    pub fn is_non_degenerate(&self) -> bool {
        (0..N).all(|i| self.hi[i] > self.lo[i] && (self.hi[i] - self.lo[i]).is_finite())
    }

    pub fn contains(&self, x: &SVector<f64, N>) -> bool {
        (0..N).all(|i| x[i] >= self.lo[i] && x[i] <= self.hi[i])
    }

    /// Maps a unit-cube point into the box.
    pub fn map_unit(&self, u: &SVector<f64, N>) -> SVector<f64, N> {
        SVector::from_fn(|i, _| self.lo[i] + (self.hi[i] - self.lo[i]) * u[i])
    }
}
