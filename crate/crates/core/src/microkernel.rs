//! Outer-product micro-kernel.
//!
//! One call computes an `nf x nw` output tile as a sum of `K` outer products
//! between a packed filter step (`nf` values) and a packed input step (`nw`
//! values), accumulating in place. Steps are consumed in ascending order and
//! every update is a separate multiply then add, so a given backend always
//! produces the same bits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packing::{FilterTile, PackedInputTile};
use crate::tensor::Tensor3;

/// Micro-kernel implementation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Scalar loops; defines the semantics.
    #[default]
    Reference,
    /// Register-blocked kernel for 8- and 16-wide tiles.
    Accelerated,
}

impl Backend {
    pub fn is_available(self) -> bool {
        match self {
            Backend::Reference => true,
            Backend::Accelerated => cfg!(feature = "accelerated"),
        }
    }
}

impl std::str::FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "reference" => Ok(Backend::Reference),
            "accelerated" => Ok(Backend::Accelerated),
            other => Err(format!("unknown micro-kernel backend `{other}` (expected reference|accelerated)")),
        }
    }
}

/// `nf x nw` grid of partial sums, row `f` holds filter `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulator {
    nf: usize,
    nw: usize,
    values: Vec<f32>,
}

impl Accumulator {
    pub fn zeros(nf: usize, nw: usize) -> Self {
        Accumulator {
            nf,
            nw,
            values: vec![0.0; nf * nw],
        }
    }

    /// Resizes to `nf x nw` and clears, reusing the allocation.
    pub fn reset(&mut self, nf: usize, nw: usize) {
        self.nf = nf;
        self.nw = nw;
        self.values.clear();
        self.values.resize(nf * nw, 0.0);
    }

    pub fn nf(&self) -> usize {
        self.nf
    }

    pub fn nw(&self) -> usize {
        self.nw
    }

    pub fn get(&self, f: usize, w: usize) -> f32 {
        self.values[f * self.nw + w]
    }

    pub fn row(&self, f: usize) -> &[f32] {
        &self.values[f * self.nw..(f + 1) * self.nw]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.values
    }
}

/// Runs `k` steps of the micro-kernel over packed tiles.
pub fn microkernel(
    filters: FilterTile<'_>,
    input: &PackedInputTile,
    acc: &mut Accumulator,
    k: usize,
    backend: Backend,
) -> Result<()> {
    if filters.nc != input.nc || filters.window_len != input.window_len {
        return Err(Error::DimMismatch(format!(
            "filter tile is {}x{} steps, input tile {}x{}",
            filters.nc, filters.window_len, input.nc, input.window_len
        )));
    }
    outer_product_sum(filters.data, filters.nf, &input.data, input.nw, k, acc, backend)
}

/// `acc[f][w] += sum_{kk < k} a[kk * nf + f] * b[kk * nw + w]`.
pub fn outer_product_sum(
    a: &[f32],
    nf: usize,
    b: &[f32],
    nw: usize,
    k: usize,
    acc: &mut Accumulator,
    backend: Backend,
) -> Result<()> {
    if acc.nf != nf || acc.nw != nw {
        return Err(Error::DimMismatch(format!(
            "accumulator is {}x{}, tiles are {nf}x{nw}",
            acc.nf, acc.nw
        )));
    }
    if a.len() < k * nf || b.len() < k * nw {
        return Err(Error::DimMismatch(format!(
            "{k} steps need {} filter and {} input values, tiles hold {} and {}",
            k * nf,
            k * nw,
            a.len(),
            b.len()
        )));
    }
    match backend {
        Backend::Reference => reference(a, nf, b, nw, k, &mut acc.values, 0..nf),
        Backend::Accelerated => {
            if !backend.is_available() {
                return Err(Error::Unsupported("accelerated micro-kernel not built".into()));
            }
            accelerated(a, nf, b, nw, k, &mut acc.values)
        }
    }
    Ok(())
}

fn reference(a: &[f32], nf: usize, b: &[f32], nw: usize, k: usize, acc: &mut [f32], rows: std::ops::Range<usize>) {
    for kk in 0..k {
        let a_k = &a[kk * nf..(kk + 1) * nf];
        let b_k = &b[kk * nw..(kk + 1) * nw];
        for f in rows.clone() {
            let av = a_k[f];
            let row = &mut acc[f * nw..(f + 1) * nw];
            for (r, &bv) in row.iter_mut().zip(b_k) {
                *r += av * bv;
            }
        }
    }
}

fn accelerated(a: &[f32], nf: usize, b: &[f32], nw: usize, k: usize, acc: &mut [f32]) {
    match nw {
        16 => blocked::<16>(a, nf, b, k, acc),
        8 => blocked::<8>(a, nf, b, k, acc),
        _ => reference(a, nf, b, nw, k, acc, 0..nf),
    }
}

const ROWS: usize = 4;

/// Keeps a `4 x NW` block of the accumulator in registers across all steps.
fn blocked<const NW: usize>(a: &[f32], nf: usize, b: &[f32], k: usize, acc: &mut [f32]) {
    let full = nf / ROWS * ROWS;
    for f0 in (0..full).step_by(ROWS) {
        let mut regs = [[0.0f32; NW]; ROWS];
        for (r, reg) in regs.iter_mut().enumerate() {
            reg.copy_from_slice(&acc[(f0 + r) * NW..(f0 + r + 1) * NW]);
        }
        for kk in 0..k {
            let b_k: &[f32; NW] = b[kk * NW..(kk + 1) * NW].try_into().unwrap();
            let a_k = &a[kk * nf + f0..kk * nf + f0 + ROWS];
            for (reg, &av) in regs.iter_mut().zip(a_k) {
                for w in 0..NW {
                    reg[w] += av * b_k[w];
                }
            }
        }
        for (r, reg) in regs.iter().enumerate() {
            acc[(f0 + r) * NW..(f0 + r + 1) * NW].copy_from_slice(reg);
        }
    }
    if full < nf {
        reference(a, nf, b, NW, k, acc, full..nf);
    }
}

/// Writes `acc` to output channels `f_base..` at flattened positions
/// `window_base..`; always overwrites.
pub fn store_accumulator(acc: &Accumulator, output: &mut Tensor3, f_base: usize, window_base: usize) -> Result<()> {
    let plane = check_region(acc, output, f_base, window_base)?;
    let out = output.as_mut_slice();
    for f in 0..acc.nf {
        let start = (f_base + f) * plane + window_base;
        out[start..start + acc.nw].copy_from_slice(acc.row(f));
    }
    Ok(())
}

/// Loads the output region that [`store_accumulator`] would write.
pub fn load_accumulator(acc: &mut Accumulator, output: &Tensor3, f_base: usize, window_base: usize) -> Result<()> {
    let plane = check_region(acc, output, f_base, window_base)?;
    let src = output.as_slice();
    let nw = acc.nw;
    for f in 0..acc.nf {
        let start = (f_base + f) * plane + window_base;
        acc.values[f * nw..(f + 1) * nw].copy_from_slice(&src[start..start + nw]);
    }
    Ok(())
}

fn check_region(acc: &Accumulator, output: &Tensor3, f_base: usize, window_base: usize) -> Result<usize> {
    let plane = output.height() * output.width();
    if f_base + acc.nf > output.channels() || window_base + acc.nw > plane {
        return Err(Error::TileOutOfRange(format!(
            "output tile {}x{} at filter {f_base}, window {window_base} exceeds output {:?}",
            acc.nf,
            acc.nw,
            output.dims()
        )));
    }
    Ok(plane)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive(a: &[f32], nf: usize, b: &[f32], nw: usize, k: usize) -> Vec<f32> {
        let mut c = vec![0.0f32; nf * nw];
        for f in 0..nf {
            for w in 0..nw {
                for kk in 0..k {
                    c[f * nw + w] += a[kk * nf + f] * b[kk * nw + w];
                }
            }
        }
        c
    }

    fn values(n: usize, seed: u64) -> Vec<f32> {
        let rng = crate::rng::CounterRng::new(seed, 99);
        (0..n).map(|i| rng.uniform(i as u64)).collect()
    }

    #[test]
    fn single_outer_product() {
        let mut acc = Accumulator::zeros(4, 4);
        outer_product_sum(&[5.0, 6.0, 7.0, 8.0], 4, &[1.0, 2.0, 3.0, 4.0], 4, 1, &mut acc, Backend::Reference).unwrap();
        assert_eq!(acc.get(2, 3), 28.0);
        assert_eq!(acc.get(0, 0), 5.0);
    }

    #[test]
    fn zero_input_leaves_accumulator() {
        let mut acc = Accumulator::zeros(8, 16);
        acc.as_mut_slice().iter_mut().enumerate().for_each(|(i, v)| *v = i as f32);
        let before = acc.clone();
        outer_product_sum(&values(8 * 5, 1), 8, &[0.0; 16 * 5], 16, 5, &mut acc, Backend::Reference).unwrap();
        assert_eq!(acc, before);
    }

    #[test]
    fn matches_naive_gemm() {
        for (nf, nw, k) in [(8, 16, 18), (2, 5, 18), (24, 16, 9), (3, 8, 7)] {
            let (a, b) = (values(nf * k, 2), values(nw * k, 3));
            let expected = naive(&a, nf, &b, nw, k);
            for backend in [Backend::Reference, Backend::Accelerated] {
                let mut acc = Accumulator::zeros(nf, nw);
                outer_product_sum(&a, nf, &b, nw, k, &mut acc, backend).unwrap();
                assert_eq!(acc.as_slice(), &expected[..], "{backend:?} {nf}x{nw}x{k}");
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let mut acc = Accumulator::zeros(4, 4);
        assert!(outer_product_sum(&[0.0; 8], 2, &[0.0; 8], 4, 2, &mut acc, Backend::Reference).is_err());
        assert!(outer_product_sum(&[0.0; 4], 4, &[0.0; 8], 4, 2, &mut acc, Backend::Reference).is_err());
    }

    #[test]
    fn stores_land_on_the_right_rows() {
        let mut out = Tensor3::zeros(3, 2, 3);
        let mut acc = Accumulator::zeros(2, 4);
        acc.as_mut_slice().iter_mut().enumerate().for_each(|(i, v)| *v = (i + 1) as f32);
        // Windows 1..5 span output rows 0 and 1.
        store_accumulator(&acc, &mut out, 1, 1).unwrap();
        assert_eq!(out.get(1, 0, 1), 1.0);
        assert_eq!(out.get(1, 0, 2), 2.0);
        assert_eq!(out.get(1, 1, 0), 3.0);
        assert_eq!(out.get(2, 1, 1), 8.0);
        assert_eq!(out.get(0, 0, 0), 0.0);
        let mut back = Accumulator::zeros(2, 4);
        load_accumulator(&mut back, &out, 1, 1).unwrap();
        assert_eq!(back, acc);
        let single = Accumulator::zeros(1, 1);
        store_accumulator(&single, &mut out, 2, 5).unwrap();
        assert!(store_accumulator(&acc, &mut out, 2, 0).is_err());
        assert!(store_accumulator(&acc, &mut out, 0, 3).is_err());
    }

    proptest! {
        #[test]
        fn splitting_steps_is_exact(nf in 1usize..10, nw in 1usize..20, k in 1usize..30, split in 0usize..30, seed in 0u64..100) {
            let split = split.min(k);
            let (a, b) = (values(nf * k, seed), values(nw * k, seed + 1));
            let mut whole = Accumulator::zeros(nf, nw);
            outer_product_sum(&a, nf, &b, nw, k, &mut whole, Backend::Reference).unwrap();
            let mut parts = Accumulator::zeros(nf, nw);
            outer_product_sum(&a, nf, &b, nw, split, &mut parts, Backend::Reference).unwrap();
            outer_product_sum(&a[split * nf..], nf, &b[split * nw..], nw, k - split, &mut parts, Backend::Reference).unwrap();
            prop_assert_eq!(whole.as_slice(), parts.as_slice());
        }

        #[test]
        fn scaling_by_power_of_two_is_exact(nf in 1usize..10, nw in 1usize..20, k in 1usize..20, e in -4i32..4, seed in 0u64..100) {
            let scale = 2f32.powi(e);
            let (a, b) = (values(nf * k, seed), values(nw * k, seed + 7));
            let scaled: Vec<f32> = a.iter().map(|v| v * scale).collect();
            let mut x = Accumulator::zeros(nf, nw);
            outer_product_sum(&a, nf, &b, nw, k, &mut x, Backend::Reference).unwrap();
            let mut y = Accumulator::zeros(nf, nw);
            outer_product_sum(&scaled, nf, &b, nw, k, &mut y, Backend::Reference).unwrap();
            for (u, v) in x.as_slice().iter().zip(y.as_slice()) {
                prop_assert_eq!(u * scale, *v);
            }
        }
    }
}
