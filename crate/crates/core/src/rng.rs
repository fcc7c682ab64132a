//! Counter-based pseudorandom tensors.
//!
//! Element `i` of stream `s` under seed `k` is a pure function of `(k, s, i)`:
//!
//! ```text
//! mix(x)  = splitmix64 finalizer of (x + 0x9E3779B97F4A7C15)
//! h       = mix(mix(mix(k) ^ s) ^ i)
//! value   = (h >> 40) / 2^23 - 1        // 24-bit, uniform in [-1, 1)
//! ```
//!
//! so any language can regenerate the same tensors without sharing state.

use crate::shape::ConvShape;
use crate::tensor::{Tensor3, Tensor4};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        CounterRng {
            key: mix(mix(seed) ^ stream),
        }
    }

    #[inline]
    pub fn bits(&self, counter: u64) -> u64 {
        mix(self.key ^ counter)
    }

    /// Uniform in `[-1, 1)` with 24 significant bits (exact in f32).
    #[inline]
    pub fn uniform(&self, counter: u64) -> f32 {
        let top = (self.bits(counter) >> 40) as f32;
        top / (1u32 << 23) as f32 - 1.0
    }

    pub fn fill(&self, out: &mut [f32]) {
        for (i, v) in out.iter_mut().enumerate() {
            *v = self.uniform(i as u64);
        }
    }
}

/// Input and filter tensors for layer `layer_index` of a corpus.
pub fn layer_tensors(shape: &ConvShape, seed: u64, layer_index: u64) -> (Tensor3, Tensor4) {
    let mut input = Tensor3::zeros(shape.in_c, shape.in_h, shape.in_w);
    CounterRng::new(seed, 2 * layer_index).fill(input.as_mut_slice());
    let mut filters = Tensor4::zeros(shape.out_c, shape.in_c, shape.f_h, shape.f_w);
    CounterRng::new(seed, 2 * layer_index + 1).fill(filters.as_mut_slice());
    (input, filters)
}
