//! Reference implementations: naive direct convolution and Im2Col + GEMM.
//!
//! All paths accumulate each output in ascending `(c, fh, fw)` order
//! starting from zero, one multiply and one add per step, so on identical
//! inputs they agree bit for bit with each other and with the tiled
//! executor.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::executor::{pad_input, ExecutionStats};
use crate::machine::MachineSpec;
use crate::microkernel::{self, Accumulator, Backend};
use crate::shape::ConvShape;
use crate::tensor::{Matrix, Tensor3, Tensor4};

fn check_operands(input: &Tensor3, filters: &Tensor4, shape: &ConvShape) -> Result<()> {
    shape.validate()?;
    let want_in = [shape.in_c, shape.in_h, shape.in_w];
    let want_f = [shape.out_c, shape.in_c, shape.f_h, shape.f_w];
    if input.dims() != want_in || filters.dims() != want_f {
        return Err(Error::DimMismatch(format!(
            "input {:?} and filters {:?}, shape expects {want_in:?} and {want_f:?}",
            input.dims(),
            filters.dims()
        )));
    }
    Ok(())
}

/// Seven-loop direct convolution.
pub fn conv_naive(input: &Tensor3, filters: &Tensor4, shape: &ConvShape) -> Result<Tensor3> {
    check_operands(input, filters, shape)?;
    let padded = pad_input(input, shape)?;
    let (oh, ow) = (shape.out_h(), shape.out_w());
    let mut out = Tensor3::zeros(shape.out_c, oh, ow);
    for f in 0..shape.out_c {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0f32;
                for c in 0..shape.in_c {
                    for i in 0..shape.f_h {
                        for j in 0..shape.f_w {
                            let v = padded.get(c, y * shape.stride_h + i, x * shape.stride_w + j);
                            acc += filters.get(f, c, i, j) * v;
                        }
                    }
                }
                out.set(f, y, x, acc);
            }
        }
    }
    Ok(out)
}

/// Patch matrix: row `(c, fh, fw)`, column = output position.
pub fn im2col(input: &Tensor3, shape: &ConvShape) -> Result<Matrix> {
    let padded = pad_input(input, shape)?;
    Ok(im2col_padded(&padded, shape))
}

fn im2col_padded(padded: &Tensor3, shape: &ConvShape) -> Matrix {
    let (oh, ow) = (shape.out_h(), shape.out_w());
    let rows = shape.in_c * shape.window_len();
    let cols = oh * ow;
    let mut m = Matrix::zeros(rows, cols);
    let mut r = 0;
    for c in 0..shape.in_c {
        for i in 0..shape.f_h {
            for j in 0..shape.f_w {
                let dst = &mut m.data[r * cols..(r + 1) * cols];
                for y in 0..oh {
                    for x in 0..ow {
                        dst[y * ow + x] = padded.get(c, y * shape.stride_h + i, x * shape.stride_w + j);
                    }
                }
                r += 1;
            }
        }
    }
    m
}

fn check_gemm(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.cols != b.rows {
        return Err(Error::DimMismatch(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

/// Triple-loop `a * b`.
pub fn gemm_naive(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_gemm(a, b)?;
    let mut c = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0f32;
            for k in 0..a.cols {
                acc += a.get(i, k) * b.get(k, j);
            }
            c.set(i, j, acc);
        }
    }
    Ok(c)
}

/// Cache blocking and register tile of [`gemm_packed`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmBlocking {
    /// Rows of `a` per micro-tile.
    pub mr: usize,
    /// Columns of `b` per micro-tile.
    pub nr: usize,
    pub kc: usize,
    pub nc: usize,
}

impl GemmBlocking {
    pub fn new(mr: usize, nr: usize) -> Self {
        GemmBlocking { mr, nr, kc: 256, nc: 4096 }
    }

    /// `mr x nr` micro-tiles from the machine's kernel shape; `kc` so that
    /// one A and one B micro-panel fill the L1 budget, `nc` so that a packed
    /// `kc x nc` block of B fills the L2 budget.
    pub fn for_machine(machine: &MachineSpec) -> Self {
        let (mr, nr) = (machine.nf, machine.nwin);
        let dt = machine.dt_bytes as u64;
        let kc = (machine.l1_budget() / ((mr + nr) as u64 * dt)).max(1) as usize;
        let nc = (machine.l2_budget() / (kc as u64 * dt)) as usize / nr * nr;
        GemmBlocking { mr, nr, kc, nc: nc.max(nr) }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmStats {
    pub pack_a_stores: u64,
    pub pack_b_stores: u64,
    pub microkernel_calls: u64,
}

/// Blocked GEMM on packed panels using the direct path's micro-kernel.
///
/// `a` is packed once into `mr`-row panels; each `kc x nc` block of `b` is
/// packed into `nr`-column panels before use.
pub fn gemm_packed(a: &Matrix, b: &Matrix, blocking: GemmBlocking, backend: Backend) -> Result<(Matrix, GemmStats)> {
    let (c, stats, _) = gemm_packed_timed(a, b, blocking, backend)?;
    Ok((c, stats))
}

struct GemmTimes {
    pack: std::time::Duration,
    kernel: std::time::Duration,
    workspace_elems: usize,
}

fn gemm_packed_timed(
    a: &Matrix,
    b: &Matrix,
    blocking: GemmBlocking,
    backend: Backend,
) -> Result<(Matrix, GemmStats, GemmTimes)> {
    check_gemm(a, b)?;
    let GemmBlocking { mr, nr, kc, nc } = blocking;
    if mr == 0 || nr == 0 || kc == 0 || nc == 0 {
        return Err(Error::Unsupported(format!("GEMM blocking {blocking:?} has a zero size")));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut stats = GemmStats::default();
    let mut times = GemmTimes {
        pack: Default::default(),
        kernel: Default::default(),
        workspace_elems: 0,
    };
    let mut c = Matrix::zeros(m, n);

    // Panel p holds rows p*mr.. as [k][row]; any k-range is contiguous.
    let start = Instant::now();
    let mut packed_a = vec![0.0f32; m * k];
    for i0 in (0..m).step_by(mr) {
        let rows = mr.min(m - i0);
        let panel = &mut packed_a[i0 * k..(i0 + rows) * k];
        for kk in 0..k {
            for r in 0..rows {
                panel[kk * rows + r] = a.data[(i0 + r) * k + kk];
            }
        }
    }
    stats.pack_a_stores = (m * k) as u64;
    times.pack += start.elapsed();

    let mut packed_b = vec![0.0f32; kc.min(k) * nc.min(n)];
    times.workspace_elems = packed_a.len() + packed_b.len() + mr * nr;
    let mut acc = Accumulator::zeros(mr, nr);
    for j0 in (0..n).step_by(nc) {
        let ncols = nc.min(n - j0);
        for p0 in (0..k).step_by(kc) {
            let depth = kc.min(k - p0);
            let start = Instant::now();
            // Column panel q of the block holds columns j0+q*nr.. as [k][col].
            for q0 in (0..ncols).step_by(nr) {
                let cols = nr.min(ncols - q0);
                let panel = &mut packed_b[q0 * depth..(q0 + cols) * depth];
                for kk in 0..depth {
                    let src = &b.data[(p0 + kk) * n + j0 + q0..][..cols];
                    panel[kk * cols..(kk + 1) * cols].copy_from_slice(src);
                }
            }
            stats.pack_b_stores += (depth * ncols) as u64;
            times.pack += start.elapsed();

            for i0 in (0..m).step_by(mr) {
                let rows = mr.min(m - i0);
                let a_panel = &packed_a[i0 * k + p0 * rows..i0 * k + (p0 + depth) * rows];
                for q0 in (0..ncols).step_by(nr) {
                    let cols = nr.min(ncols - q0);
                    let b_panel = &packed_b[q0 * depth..(q0 + cols) * depth];
                    acc.reset(rows, cols);
                    if p0 > 0 {
                        for r in 0..rows {
                            let src = &c.data[(i0 + r) * n + j0 + q0..][..cols];
                            acc.as_mut_slice()[r * cols..(r + 1) * cols].copy_from_slice(src);
                        }
                    }
                    let start = Instant::now();
                    microkernel::outer_product_sum(a_panel, rows, b_panel, cols, depth, &mut acc, backend)?;
                    times.kernel += start.elapsed();
                    stats.microkernel_calls += 1;
                    for r in 0..rows {
                        c.data[(i0 + r) * n + j0 + q0..][..cols].copy_from_slice(acc.row(r));
                    }
                }
            }
        }
    }
    Ok((c, stats, times))
}

fn filter_matrix(filters: &Tensor4, shape: &ConvShape) -> Matrix {
    let k = shape.in_c * shape.window_len();
    Matrix::from_vec(shape.out_c, k, filters.as_slice().to_vec()).expect("filter tensor is out_c x k")
}

fn matrix_to_output(c: Matrix, shape: &ConvShape) -> Tensor3 {
    Tensor3::from_vec(shape.out_c, shape.out_h(), shape.out_w(), c.data).expect("GEMM result is out_c x out_hw")
}

/// Im2Col + packed GEMM. `pack_store_count` covers the patch matrix and
/// both GEMM packing steps.
pub fn conv_im2col(
    input: &Tensor3,
    filters: &Tensor4,
    shape: &ConvShape,
    blocking: GemmBlocking,
    backend: Backend,
) -> Result<(Tensor3, ExecutionStats)> {
    let start = Instant::now();
    check_operands(input, filters, shape)?;
    let t = Instant::now();
    let padded = pad_input(input, shape)?;
    let patches = im2col_padded(&padded, shape);
    let im2col_time = t.elapsed();
    let a = filter_matrix(filters, shape);
    let (c, gs, times) = gemm_packed_timed(&a, &patches, blocking, backend)?;

    let padded_elems = if shape.pad_h + shape.pad_w > 0 { padded.as_slice().len() } else { 0 };
    let mut stats = ExecutionStats {
        pack_time: im2col_time + times.pack,
        microkernel_time: times.kernel,
        pack_store_count: (patches.data.len() as u64) + gs.pack_a_stores + gs.pack_b_stores,
        microkernel_calls: gs.microkernel_calls,
        workspace_bytes: 4 * (padded_elems + patches.data.len() + a.data.len() + times.workspace_elems) as u64,
        ..Default::default()
    };
    stats.total_time = start.elapsed();
    stats.other_time = stats.total_time.saturating_sub(stats.pack_time).saturating_sub(stats.microkernel_time);
    Ok((matrix_to_output(c, shape), stats))
}

/// 1x1, stride-1, unpadded layers as a GEMM on the input itself.
pub fn conv_pointwise_gemm(
    input: &Tensor3,
    filters: &Tensor4,
    shape: &ConvShape,
    blocking: GemmBlocking,
    backend: Backend,
) -> Result<(Tensor3, ExecutionStats)> {
    let start = Instant::now();
    check_operands(input, filters, shape)?;
    if !shape.is_pointwise() {
        return Err(Error::Unsupported("direct GEMM needs a 1x1, stride-1, unpadded layer".into()));
    }
    let b = Matrix::from_vec(shape.in_c, shape.in_h * shape.in_w, input.as_slice().to_vec())?;
    let a = filter_matrix(filters, shape);
    let (c, gs, times) = gemm_packed_timed(&a, &b, blocking, backend)?;
    let mut stats = ExecutionStats {
        pack_time: times.pack,
        microkernel_time: times.kernel,
        pack_store_count: gs.pack_a_stores + gs.pack_b_stores,
        microkernel_calls: gs.microkernel_calls,
        workspace_bytes: 4 * (b.data.len() + a.data.len() + times.workspace_elems) as u64,
        ..Default::default()
    };
    stats.total_time = start.elapsed();
    stats.other_time = stats.total_time.saturating_sub(stats.pack_time).saturating_sub(stats.microkernel_time);
    Ok((matrix_to_output(c, shape), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::layer_tensors;
    use crate::tensor::max_relative_error;
    use proptest::prelude::*;

    fn conv_f64(input: &Tensor3, filters: &Tensor4, shape: &ConvShape) -> Vec<f64> {
        let p = pad_input(input, shape).unwrap();
        let mut out = Vec::new();
        for f in 0..shape.out_c {
            for y in 0..shape.out_h() {
                for x in 0..shape.out_w() {
                    let mut s = 0.0f64;
                    for c in 0..shape.in_c {
                        for i in 0..shape.f_h {
                            for j in 0..shape.f_w {
                                s += filters.get(f, c, i, j) as f64
                                    * p.get(c, y * shape.stride_h + i, x * shape.stride_w + j) as f64;
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
        out
    }

    #[test]
    fn naive_single_window() {
        let shape = ConvShape::square(2, 2, 1, 2, 1, 0);
        let input = Tensor3::from_vec(2, 2, 2, (1..=8).map(|v| v as f32).collect()).unwrap();
        let filters = Tensor4::from_vec(1, 2, 2, 2, vec![1.0; 8]).unwrap();
        let out = conv_naive(&input, &filters, &shape).unwrap();
        assert_eq!(out.as_slice(), &[36.0]);
    }

    #[test]
    fn naive_padding_and_stride() {
        // 3x3 ones over a 4x4 ones image, pad 1, stride 2: corners see 4 taps,
        // the rest 6 or 9.
        let shape = ConvShape::square(1, 4, 1, 3, 2, 1);
        let input = Tensor3::from_vec(1, 4, 4, vec![1.0; 16]).unwrap();
        let filters = Tensor4::from_vec(1, 1, 3, 3, vec![1.0; 9]).unwrap();
        let out = conv_naive(&input, &filters, &shape).unwrap();
        assert_eq!(out.dims(), [1, 2, 2]);
        assert_eq!(out.as_slice(), &[4.0, 6.0, 6.0, 9.0]);
    }

    #[test]
    fn naive_delta_picks_center_weight() {
        let shape = ConvShape::square(1, 3, 1, 3, 1, 1);
        let mut input = Tensor3::zeros(1, 3, 3);
        input.set(0, 1, 1, 1.0);
        let filters = Tensor4::from_vec(1, 1, 3, 3, (1..=9).map(|v| v as f32).collect()).unwrap();
        let out = conv_naive(&input, &filters, &shape).unwrap();
        assert_eq!(out.get(0, 1, 1), 5.0);
    }

    #[test]
    fn naive_all_ones() {
        let shape = ConvShape::square(1, 4, 1, 3, 1, 0);
        let input = Tensor3::from_vec(1, 4, 4, vec![1.0; 16]).unwrap();
        let filters = Tensor4::from_vec(1, 1, 3, 3, vec![1.0; 9]).unwrap();
        assert_eq!(conv_naive(&input, &filters, &shape).unwrap().as_slice(), &[9.0; 4]);
    }

    #[test]
    fn naive_strided_padded_against_f64() {
        let shape = ConvShape::square(2, 5, 3, 3, 2, 1);
        let (input, filters) = layer_tensors(&shape, 21, 0);
        let out = conv_naive(&input, &filters, &shape).unwrap();
        assert_eq!(out.dims(), [3, 3, 3]);
        let exact = conv_f64(&input, &filters, &shape);
        for (&a, &e) in out.as_slice().iter().zip(&exact) {
            assert!((a as f64 - e).abs() <= 1e-5 * e.abs().max(1.0), "{a} vs {e}");
        }
    }

    #[test]
    fn naive_close_to_f64() {
        let shape = ConvShape::square(16, 9, 5, 3, 1, 1);
        let (input, filters) = layer_tensors(&shape, 11, 0);
        let out = conv_naive(&input, &filters, &shape).unwrap();
        let exact = conv_f64(&input, &filters, &shape);
        for (&a, &e) in out.as_slice().iter().zip(&exact) {
            assert!((a as f64 - e).abs() <= 1e-5 * 144.0, "{a} vs {e}");
        }
    }

    #[test]
    fn naive_rejects_wrong_dims() {
        let shape = ConvShape::square(2, 4, 3, 3, 1, 0);
        let input = Tensor3::zeros(2, 4, 5);
        let filters = Tensor4::zeros(3, 2, 3, 3);
        assert!(matches!(conv_naive(&input, &filters, &shape), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn im2col_pointwise_is_the_input() {
        let shape = ConvShape::square(5, 6, 3, 1, 1, 0);
        let (input, _) = layer_tensors(&shape, 1, 0);
        let m = im2col(&input, &shape).unwrap();
        assert_eq!((m.rows, m.cols), (5, 36));
        assert_eq!(m.data, input.as_slice());
    }

    #[test]
    fn im2col_small() {
        let shape = ConvShape::square(1, 3, 1, 2, 1, 0);
        let input = Tensor3::from_vec(1, 3, 3, (0..9).map(|v| v as f32).collect()).unwrap();
        let m = im2col(&input, &shape).unwrap();
        assert_eq!(
            m.data,
            [0.0, 1.0, 3.0, 4.0, 1.0, 2.0, 4.0, 5.0, 3.0, 4.0, 6.0, 7.0, 4.0, 5.0, 7.0, 8.0]
        );
    }

    #[test]
    fn im2col_full_window_is_one_column() {
        let shape = ConvShape::square(1, 3, 1, 3, 1, 0);
        let input = Tensor3::from_vec(1, 3, 3, (0..9).map(|v| v as f32).collect()).unwrap();
        let m = im2col(&input, &shape).unwrap();
        assert_eq!((m.rows, m.cols), (9, 1));
        assert_eq!(m.data, input.as_slice());
    }

    #[test]
    fn im2col_columns_are_windows() {
        let shape = ConvShape::square(3, 9, 1, 3, 2, 1);
        let (input, _) = layer_tensors(&shape, 5, 0);
        let m = im2col(&input, &shape).unwrap();
        let p = pad_input(&input, &shape).unwrap();
        for win in 0..m.cols {
            let (y, x) = (win / shape.out_w() * 2, win % shape.out_w() * 2);
            let mut window = Vec::new();
            for c in 0..3 {
                for i in 0..3 {
                    for j in 0..3 {
                        window.push(p.get(c, y + i, x + j));
                    }
                }
            }
            let column: Vec<f32> = (0..m.rows).map(|r| m.get(r, win)).collect();
            assert_eq!(column, window);
        }
    }

    #[test]
    fn gemm_two_by_two() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(gemm_naive(&a, &b).unwrap().data, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn packed_gemm_against_f64() {
        let rng = crate::rng::CounterRng::new(8, 0);
        let a = Matrix::from_vec(24, 18, (0..432).map(|i| rng.uniform(i)).collect()).unwrap();
        let b = Matrix::from_vec(18, 16, (432..720).map(|i| rng.uniform(i)).collect()).unwrap();
        let blocking = GemmBlocking::for_machine(&MachineSpec::power10());
        let (c, _) = gemm_packed(&a, &b, blocking, Backend::Reference).unwrap();
        for i in 0..24 {
            for j in 0..16 {
                let e: f64 = (0..18).map(|k| a.get(i, k) as f64 * b.get(k, j) as f64).sum();
                assert!((c.get(i, j) as f64 - e).abs() <= 1e-5 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn machine_blocking_fits_the_budgets() {
        let m = MachineSpec::power10();
        let b = GemmBlocking::for_machine(&m);
        assert_eq!((b.mr, b.nr), (8, 16));
        assert!(((b.mr + b.nr) * b.kc * 4) as u64 <= m.l1_budget());
        assert!((b.kc * b.nc * 4) as u64 <= m.l2_budget());
        assert_eq!(b.nc % 16, 0);
    }

    #[test]
    fn gemm_identity() {
        let b = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(gemm_naive(&Matrix::identity(3), &b).unwrap(), b);
        assert!(gemm_naive(&Matrix::identity(2), &b).is_err());
    }

    #[test]
    fn packed_gemm_counts_stores() {
        let a = Matrix::from_vec(10, 7, (0..70).map(|v| v as f32 * 0.5).collect()).unwrap();
        let b = Matrix::from_vec(7, 9, (0..63).map(|v| 1.0 - v as f32 * 0.25).collect()).unwrap();
        let blocking = GemmBlocking { mr: 4, nr: 4, kc: 3, nc: 5 };
        let (c, stats) = gemm_packed(&a, &b, blocking, Backend::Reference).unwrap();
        assert_eq!(c, gemm_naive(&a, &b).unwrap());
        assert_eq!(stats.pack_a_stores, 70);
        assert_eq!(stats.pack_b_stores, 63);
        // 3 row panels x 3 k-blocks x (2 + 1) column panels.
        assert_eq!(stats.microkernel_calls, 27);
    }

    #[test]
    fn im2col_path_matches_naive() {
        for shape in [
            ConvShape::square(3, 11, 10, 3, 1, 1),
            ConvShape::square(4, 13, 7, 5, 2, 2),
            ConvShape::square(9, 5, 17, 1, 1, 0),
        ] {
            let (input, filters) = layer_tensors(&shape, 3, 0);
            let naive = conv_naive(&input, &filters, &shape).unwrap();
            let (out, stats) = conv_im2col(&input, &filters, &shape, GemmBlocking::new(8, 16), Backend::Reference).unwrap();
            assert_eq!(out, naive);
            let k = (shape.in_c * shape.window_len()) as u64;
            let n = (shape.out_h() * shape.out_w()) as u64;
            assert_eq!(stats.pack_store_count, 2 * k * n + shape.out_c as u64 * k);
        }
    }

    #[test]
    fn pointwise_gemm_skips_the_patch_matrix() {
        let shape = ConvShape::square(12, 7, 20, 1, 1, 0);
        let (input, filters) = layer_tensors(&shape, 4, 0);
        let naive = conv_naive(&input, &filters, &shape).unwrap();
        let blocking = GemmBlocking::new(8, 16);
        let (out, stats) = conv_pointwise_gemm(&input, &filters, &shape, blocking, Backend::Reference).unwrap();
        assert_eq!(out, naive);
        assert_eq!(stats.pack_store_count, 12 * 49 + 20 * 12);
        let strided = ConvShape::square(12, 7, 20, 1, 2, 0);
        assert!(conv_pointwise_gemm(&input, &filters, &strided, blocking, Backend::Reference).is_err());
    }

    proptest! {
        #[test]
        fn packed_gemm_is_bit_identical(
            m in 1usize..20, k in 1usize..20, n in 1usize..30,
            mr in 1usize..9, nr in 1usize..17, kc in 1usize..8, nc in 1usize..40, seed in any::<u64>(),
        ) {
            let rng = crate::rng::CounterRng::new(seed, 0);
            let a = Matrix::from_vec(m, k, (0..m * k).map(|i| rng.uniform(i as u64)).collect()).unwrap();
            let b = Matrix::from_vec(k, n, (0..k * n).map(|i| rng.uniform((m * k + i) as u64)).collect()).unwrap();
            let (c, _) = gemm_packed(&a, &b, GemmBlocking { mr, nr, kc, nc }, Backend::Reference).unwrap();
            let want = gemm_naive(&a, &b).unwrap();
            prop_assert_eq!(max_relative_error(&c.data, &want.data), 0.0);
        }
    }
}
