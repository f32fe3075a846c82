//! Seeded random streams and parameter initialization.
//!
//! The generator is ChaCha8 (`rand_chacha`), whose output stream is fixed by
//! its seed and stream id on every platform. All derived quantities
//! (uniform floats, bounded integers) are computed here from raw `u64` draws
//! so that no distribution code outside this module affects reproducibility.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Debug)]
pub struct Prng {
    inner: ChaCha8Rng,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Prng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream keyed by a label, e.g. a parameter name. Two calls
    /// with the same `(seed, label)` yield the same sequence regardless of
    /// what other streams have been drawn from.
    pub fn stream(seed: u64, label: &str) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(fnv1a(label.as_bytes()));
        Prng { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        // Rejection sampling on the largest multiple of n.
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    pub fn coin(&mut self) -> bool {
        self.next_u64() >> 63 == 1
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Xavier (Glorot) uniform initialization: samples from `[-a, a]` with
/// `a = sqrt(6 / (fan_in + fan_out))`, one draw per element.
pub fn xavier_init<T: Real>(
    fan_in: usize,
    fan_out: usize,
    shape: impl Into<Shape>,
    rng: &mut Prng,
) -> Result<Tensor<T>> {
    let shape = shape.into();
    if shape.numel() == 0 {
        return Err(Error::EmptyParameter(shape.to_string()));
    }
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::InvalidArgument(format!(
            "xavier fan_in and fan_out must be positive, got {fan_in} and {fan_out}"
        )));
    }
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..shape.numel())
        .map(|_| T::lit(a * (2.0 * rng.uniform() - 1.0)))
        .collect();
    Tensor::new(shape, data)
}
