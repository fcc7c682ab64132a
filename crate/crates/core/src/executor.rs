//! Tiled direct-convolution macro-kernel.
//!
//! Loop nest, outermost first, for input-stationary plans:
//!
//! 5. channel sets (partial sums accumulate in the output across sets)
//! 4. groups of `k3` input tiles
//! 3. groups of `k2` filter tiles
//! 2. each input tile of the group, packed on demand
//! 1. each filter tile of the group: one micro-kernel call
//!
//! Weight-stationary plans swap the operands: layer 4 walks groups of `k3`
//! filter tiles, layer 3 packs a group of `k2` input tiles at once, layer 2
//! picks the stationary filter tile and layer 1 sweeps the packed inputs.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::csa::{CostBreakdown, Schedule, TilingStrategy};
use crate::error::{Error, Result};
use crate::machine::MachineSpec;
use crate::microkernel::{self, Accumulator, Backend};
use crate::packing::{self, InputTileCoords, PackedFilterSet, PackedInputTile};
use crate::shape::ConvShape;
use crate::tensor::Tensor3;

/// Zero-pads the input by `pad_h`/`pad_w` on each side.
pub fn pad_input(input: &Tensor3, shape: &ConvShape) -> Result<Tensor3> {
    let expected = [shape.in_c, shape.in_h, shape.in_w];
    if input.dims() != expected {
        return Err(Error::DimMismatch(format!(
            "input is {:?}, shape expects {:?}",
            input.dims(),
            expected
        )));
    }
    if shape.pad_h == 0 && shape.pad_w == 0 {
        return Ok(input.clone());
    }
    let (ph, pw) = (shape.padded_h(), shape.padded_w());
    let mut padded = Tensor3::zeros(shape.in_c, ph, pw);
    for c in 0..shape.in_c {
        for y in 0..shape.in_h {
            let src = &input.as_slice()[input.index(c, y, 0)..][..shape.in_w];
            let start = padded.index(c, y + shape.pad_h, shape.pad_w);
            padded.as_mut_slice()[start..start + shape.in_w].copy_from_slice(src);
        }
    }
    Ok(padded)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutionStats {
    pub total_time: Duration,
    pub pack_time: Duration,
    pub microkernel_time: Duration,
    /// `total_time - pack_time - microkernel_time`.
    pub other_time: Duration,
    /// Element stores made by packing routines during execution.
    pub pack_store_count: u64,
    pub tile_pack_count: u64,
    pub microkernel_calls: u64,
    /// Bytes of temporary buffers allocated by the call.
    pub workspace_bytes: u64,
}

impl ExecutionStats {
    fn finish(&mut self, start: Instant) {
        self.total_time = start.elapsed();
        self.other_time = self
            .total_time
            .saturating_sub(self.pack_time)
            .saturating_sub(self.microkernel_time);
    }
}

#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Never computes the last filter tile.
    SkipLastFilterTile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOptions {
    pub backend: Backend,
    /// Use vector-based packing for unit-stride layers.
    pub vbp: bool,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions {
            backend: Backend::Reference,
            vbp: true,
            fault: None,
        }
    }
}

/// Events of the loop nest, in execution order.
trait NestVisitor {
    /// Pack input tile `tile` of channel set `cs` into buffer `slot`.
    fn pack(&mut self, cs: usize, tile: usize, slot: usize) -> Result<()>;
    /// A filter tile becomes stationary (weight-stationary only).
    fn hold_filter(&mut self, cs: usize, tile: usize);
    fn compute(&mut self, cs: usize, in_tile: usize, slot: usize, fs_tile: usize) -> Result<()>;
}

fn groups(count: usize, size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..count).step_by(size.max(1)).map(move |s| s..(s + size).min(count))
}

fn walk(strategy: &TilingStrategy, visitor: &mut impl NestVisitor) -> Result<()> {
    let c = &strategy.counts;
    let (k2, k3) = (strategy.k2, strategy.k3);
    for cs in 0..c.num_channel_sets {
        match strategy.schedule {
            Schedule::InputStationary => {
                for in_group in groups(c.num_in_t, k3) {
                    for fs_group in groups(c.num_fs_t, k2) {
                        for it in in_group.clone() {
                            visitor.pack(cs, it, 0)?;
                            for ft in fs_group.clone() {
                                visitor.compute(cs, it, 0, ft)?;
                            }
                        }
                    }
                }
            }
            Schedule::WeightStationary => {
                for fs_group in groups(c.num_fs_t, k3) {
                    for in_group in groups(c.num_in_t, k2) {
                        for (slot, it) in in_group.clone().enumerate() {
                            visitor.pack(cs, it, slot)?;
                        }
                        for ft in fs_group.clone() {
                            visitor.hold_filter(cs, ft);
                            for (slot, it) in in_group.clone().enumerate() {
                                visitor.compute(cs, it, slot, ft)?;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Input tiles packed by one execution of `strategy`.
pub fn expected_tile_packs(strategy: &TilingStrategy) -> u64 {
    let c = &strategy.counts;
    let sweeps = match strategy.schedule {
        Schedule::InputStationary => c.num_fs_t.div_ceil(strategy.k2),
        Schedule::WeightStationary => c.num_fs_t.div_ceil(strategy.k3),
    };
    (c.num_channel_sets * c.num_in_t * sweeps) as u64
}

struct Executor<'a> {
    shape: &'a ConvShape,
    strategy: &'a TilingStrategy,
    filters: &'a PackedFilterSet,
    padded: &'a Tensor3,
    output: Tensor3,
    buffers: Vec<PackedInputTile>,
    reg: Vec<f32>,
    acc: Accumulator,
    options: ExecOptions,
    stats: ExecutionStats,
}

impl Executor<'_> {
    fn coords(&self, cs: usize, tile: usize) -> InputTileCoords {
        let n_c = self.strategy.sizes.n_c;
        let nwin = self.strategy.sizes.n_win;
        let window_base = tile * nwin;
        InputTileCoords {
            c_base: cs * n_c,
            nc: n_c.min(self.shape.in_c - cs * n_c),
            window_base,
            nw: nwin.min(self.shape.num_windows() - window_base),
        }
    }
}

impl NestVisitor for Executor<'_> {
    fn pack(&mut self, cs: usize, tile: usize, slot: usize) -> Result<()> {
        let coords = self.coords(cs, tile);
        let start = Instant::now();
        let buf = &mut self.buffers[slot];
        let stores = if self.options.vbp && self.shape.is_unit_stride() {
            packing::pack_input_tile_vbp_into(buf, &mut self.reg, self.padded, self.shape, &coords)?
        } else {
            packing::pack_input_tile_into(buf, self.padded, self.shape, &coords)?
        };
        self.stats.pack_time += start.elapsed();
        self.stats.pack_store_count += stores as u64;
        self.stats.tile_pack_count += 1;
        Ok(())
    }

    fn hold_filter(&mut self, _cs: usize, _tile: usize) {}

    fn compute(&mut self, cs: usize, _in_tile: usize, slot: usize, fs_tile: usize) -> Result<()> {
        if self.options.fault == Some(Fault::SkipLastFilterTile) && fs_tile + 1 == self.filters.num_filter_tiles() {
            return Ok(());
        }
        let input = &self.buffers[slot];
        let filters = self.filters.tile(cs, fs_tile);
        let f_base = fs_tile * self.filters.nf;
        self.acc.reset(filters.nf, input.nw);
        if cs > 0 {
            microkernel::load_accumulator(&mut self.acc, &self.output, f_base, input.window_base)?;
        }
        let start = Instant::now();
        microkernel::microkernel(filters, input, &mut self.acc, input.depth(), self.options.backend)?;
        self.stats.microkernel_time += start.elapsed();
        self.stats.microkernel_calls += 1;
        microkernel::store_accumulator(&self.acc, &mut self.output, f_base, input.window_base)
    }
}

/// Runs the planned convolution with the reference micro-kernel.
pub fn conv_direct(
    input: &Tensor3,
    filters: &PackedFilterSet,
    strategy: &TilingStrategy,
    shape: &ConvShape,
    machine: &MachineSpec,
) -> Result<(Tensor3, ExecutionStats)> {
    conv_direct_with(input, filters, strategy, shape, machine, &ExecOptions::default())
}

pub fn conv_direct_with(
    input: &Tensor3,
    filters: &PackedFilterSet,
    strategy: &TilingStrategy,
    shape: &ConvShape,
    machine: &MachineSpec,
    options: &ExecOptions,
) -> Result<(Tensor3, ExecutionStats)> {
    let start = Instant::now();
    shape.validate()?;
    if shape.dt_bytes != 4 {
        return Err(Error::Unsupported(format!("{}-byte elements (only f32)", shape.dt_bytes)));
    }
    strategy.check_compatible(shape, machine)?;
    let expected = (shape.out_c, shape.in_c, shape.f_h, shape.f_w, strategy.sizes.n_c, machine.nf);
    let got = (filters.out_c, filters.in_c, filters.f_h, filters.f_w, filters.n_c, filters.nf);
    if got != expected {
        return Err(Error::StrategyMismatch(format!(
            "filters packed as (out_c, in_c, f_h, f_w, n_c, nf) = {got:?}, expected {expected:?}"
        )));
    }

    let padded = pad_input(input, shape)?;
    let slots = match strategy.schedule {
        Schedule::InputStationary => 1,
        Schedule::WeightStationary => strategy.k2,
    };
    let tile_elems = strategy.sizes.n_c * shape.window_len() * strategy.sizes.n_win;
    let mut exec = Executor {
        shape,
        strategy,
        filters,
        padded: &padded,
        output: Tensor3::zeros(shape.out_c, shape.out_h(), shape.out_w()),
        buffers: (0..slots).map(|_| PackedInputTile::with_capacity(tile_elems)).collect(),
        reg: Vec::with_capacity(strategy.sizes.n_win),
        acc: Accumulator::zeros(machine.nf, machine.nwin),
        options: *options,
        stats: ExecutionStats::default(),
    };
    let padded_bytes = if shape.pad_h + shape.pad_w > 0 {
        padded.as_slice().len()
    } else {
        0
    };
    exec.stats.workspace_bytes =
        4 * (padded_bytes + slots * tile_elems + machine.nf * machine.nwin + strategy.sizes.n_win) as u64;

    walk(strategy, &mut exec)?;

    let Executor { output, mut stats, .. } = exec;
    stats.finish(start);
    Ok((output, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TileKind {
    #[serde(rename = "IN")]
    Input,
    #[serde(rename = "FS")]
    Filter,
}

/// One tile touched by the loop nest. `tile` is unique within its channel set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileTouch {
    pub kind: TileKind,
    pub channel_set: usize,
    pub tile: usize,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileTrace {
    pub schedule: Schedule,
    /// Model prediction for the strategy that produced the trace.
    pub model: CostBreakdown,
    pub events: Vec<TileTouch>,
}

struct TraceRecorder {
    schedule: Schedule,
    in_bytes: u64,
    fs_bytes: u64,
    trace: TileTrace,
}

impl TraceRecorder {
    fn touch(&mut self, kind: TileKind, cs: usize, tile: usize) {
        let bytes = match kind {
            TileKind::Input => self.in_bytes,
            TileKind::Filter => self.fs_bytes,
        };
        self.trace.events.push(TileTouch {
            kind,
            channel_set: cs,
            tile,
            bytes,
        });
    }
}

impl NestVisitor for TraceRecorder {
    fn pack(&mut self, cs: usize, tile: usize, _slot: usize) -> Result<()> {
        self.touch(TileKind::Input, cs, tile);
        Ok(())
    }

    fn hold_filter(&mut self, cs: usize, tile: usize) {
        self.touch(TileKind::Filter, cs, tile);
    }

    fn compute(&mut self, cs: usize, in_tile: usize, _slot: usize, fs_tile: usize) -> Result<()> {
        // The stationary operand was touched when it was selected.
        match self.schedule {
            Schedule::InputStationary => self.touch(TileKind::Filter, cs, fs_tile),
            Schedule::WeightStationary => self.touch(TileKind::Input, cs, in_tile),
        }
        Ok(())
    }
}

/// Input and filter tile touches of the loop nest, in order.
///
/// Output tiles are not recorded. Every tile is charged its full planned
/// size, matching the cost model's treatment of edge tiles.
pub fn emit_tile_trace(strategy: &TilingStrategy, shape: &ConvShape, machine: &MachineSpec) -> Result<TileTrace> {
    strategy.check_compatible(shape, machine)?;
    let mut rec = TraceRecorder {
        schedule: strategy.schedule,
        in_bytes: strategy.sizes.in_t_bytes,
        fs_bytes: strategy.sizes.fs_t_bytes,
        trace: TileTrace {
            schedule: strategy.schedule,
            model: *strategy.cost(),
            events: Vec::new(),
        },
    };
    walk(strategy, &mut rec)?;
    Ok(rec.trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::conv_naive;
    use crate::csa::{self, CacheDistribution};
    use crate::packing::pack_filters;
    use crate::rng::layer_tensors;
    use crate::tensor::max_relative_error;

    fn run(shape: &ConvShape, m: &MachineSpec, strategy: &TilingStrategy, seed: u64) -> (Tensor3, Tensor3, ExecutionStats) {
        let (input, filters) = layer_tensors(shape, seed, 0);
        let packed = pack_filters(&filters, m.nf, strategy.sizes.n_c).unwrap();
        let (out, stats) = conv_direct(&input, &packed, strategy, shape, m).unwrap();
        (out, conv_naive(&input, &filters, shape).unwrap(), stats)
    }

    fn with_k(p: TilingStrategy, schedule: Schedule, k2: usize, k3: usize) -> TilingStrategy {
        p.with_distribution(schedule, CacheDistribution { k2, k3 }, &MachineSpec::power10())
    }

    #[test]
    fn pad_zero_is_identity() {
        let shape = ConvShape::square(2, 4, 1, 3, 1, 0);
        let (input, _) = layer_tensors(&shape, 1, 0);
        assert_eq!(pad_input(&input, &shape).unwrap(), input);
    }

    #[test]
    fn pad_single_element() {
        let shape = ConvShape::square(1, 1, 1, 1, 1, 1);
        let input = Tensor3::from_vec(1, 1, 1, vec![3.0]).unwrap();
        let p = pad_input(&input, &shape).unwrap();
        assert_eq!(p.dims(), [1, 3, 3]);
        assert_eq!(p.as_slice(), &[0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pad_asymmetric_axes() {
        let shape = ConvShape {
            pad_h: 1,
            pad_w: 2,
            in_h: 5,
            in_w: 7,
            ..ConvShape::square(3, 5, 1, 3, 1, 0)
        };
        let (input, _) = layer_tensors(&shape, 2, 0);
        let p = pad_input(&input, &shape).unwrap();
        assert_eq!(p.dims(), [3, 7, 11]);
        for c in 0..3 {
            for y in 0..7 {
                for x in 0..11 {
                    let inside = (1..6).contains(&y) && (2..9).contains(&x);
                    let want = if inside { input.get(c, y - 1, x - 2) } else { 0.0 };
                    assert_eq!(p.get(c, y, x).to_bits(), want.to_bits());
                }
            }
        }
    }

    #[test]
    fn degenerate_nest_calls_the_kernel_once() {
        let m = MachineSpec::power10();
        let shape = ConvShape::square(4, 4, 8, 1, 1, 0);
        let p = csa::plan(&shape, &m).unwrap();
        let (out, naive, stats) = run(&shape, &m, &p, 3);
        assert_eq!(stats.microkernel_calls, 1);
        assert_eq!(stats.tile_pack_count, 1);
        assert_eq!(out, naive);
    }

    #[test]
    fn matches_naive_and_both_schedules_agree() {
        let m = MachineSpec::power10();
        let shape = ConvShape::square(8, 9, 8, 3, 1, 1);
        let p = csa::plan(&shape, &m).unwrap();
        for schedule in [Schedule::InputStationary, Schedule::WeightStationary] {
            let (out, naive, _) = run(&shape, &m, &p.clone().with_schedule(schedule), 4);
            assert!(max_relative_error(out.as_slice(), naive.as_slice()) <= 1e-5);
        }
    }

    #[test]
    fn multiple_channel_sets_and_edge_tiles() {
        let mut m = MachineSpec::power10();
        m.l1_bytes = 4096;
        let shape = ConvShape {
            in_h: 11,
            in_w: 7,
            ..ConvShape::square(13, 11, 11, 3, 1, 1)
        };
        let p = csa::plan(&shape, &m).unwrap();
        assert!(p.counts.num_channel_sets > 1, "{p:?}");
        assert_ne!(shape.in_c % p.sizes.n_c, 0);
        for schedule in [Schedule::InputStationary, Schedule::WeightStationary] {
            let s = p.clone().with_schedule(schedule);
            let (out, naive, stats) = run(&shape, &m, &s, 5);
            assert!(max_relative_error(out.as_slice(), naive.as_slice()) <= 1e-5);
            assert_eq!(stats.tile_pack_count, expected_tile_packs(&s));
        }
    }

    #[test]
    fn strided_layer_uses_generic_packing() {
        let m = MachineSpec::power10();
        let shape = ConvShape::square(3, 15, 5, 5, 2, 2);
        let p = csa::plan(&shape, &m).unwrap();
        let (out, naive, _) = run(&shape, &m, &p, 6);
        assert!(max_relative_error(out.as_slice(), naive.as_slice()) <= 1e-5);
    }

    #[test]
    fn pack_counters_match_closed_form() {
        let m = MachineSpec::power10();
        let shape = ConvShape::square(16, 12, 40, 3, 1, 1);
        let p = csa::plan(&shape, &m).unwrap();
        for (schedule, k2, k3) in [
            (Schedule::InputStationary, 2, 3),
            (Schedule::InputStationary, 5, 9),
            (Schedule::WeightStationary, 2, 2),
            (Schedule::WeightStationary, 3, 1),
        ] {
            let s = with_k(p.clone(), schedule, k2, k3);
            let (out, naive, stats) = run(&shape, &m, &s, 7);
            assert_eq!(out, naive);
            assert_eq!(stats.tile_pack_count, expected_tile_packs(&s));
            // Each pack stores nc * f_h * f_w * nw elements; summed over the
            // windows of one sweep that is in_c * 9 * out_h * out_w.
            let sweeps = stats.tile_pack_count / (p.counts.num_in_t * p.counts.num_channel_sets) as u64;
            assert_eq!(stats.pack_store_count, sweeps * (16 * 9 * 144) as u64);
            assert_eq!(stats.microkernel_calls, (p.counts.num_channel_sets * p.counts.num_out_t) as u64);
        }
    }

    #[test]
    fn time_partition_sums_to_total() {
        let m = MachineSpec::power10();
        let shape = ConvShape::square(32, 20, 24, 3, 1, 1);
        let p = csa::plan(&shape, &m).unwrap();
        let (_, _, s) = run(&shape, &m, &p, 8);
        assert_eq!(s.pack_time + s.microkernel_time + s.other_time, s.total_time);
    }

    #[test]
    fn rejects_mismatched_strategy_and_filters() {
        let m = MachineSpec::power10();
        let shape = ConvShape::square(8, 9, 8, 3, 1, 1);
        let other = ConvShape::square(8, 10, 8, 3, 1, 1);
        let p = csa::plan(&other, &m).unwrap();
        let (input, filters) = layer_tensors(&shape, 1, 0);
        let packed = pack_filters(&filters, m.nf, p.sizes.n_c).unwrap();
        assert!(matches!(
            conv_direct(&input, &packed, &p, &shape, &m),
            Err(Error::StrategyMismatch(_))
        ));
        let p = csa::plan(&shape, &m).unwrap();
        let wrong = pack_filters(&filters, 4, p.sizes.n_c).unwrap();
        assert!(matches!(
            conv_direct(&input, &wrong, &p, &shape, &m),
            Err(Error::StrategyMismatch(_))
        ));
    }

    #[test]
    fn injected_fault_breaks_the_result() {
        let m = MachineSpec::power10();
        let shape = ConvShape::square(4, 6, 12, 3, 1, 1);
        let p = csa::plan(&shape, &m).unwrap();
        let (input, filters) = layer_tensors(&shape, 9, 0);
        let packed = pack_filters(&filters, m.nf, p.sizes.n_c).unwrap();
        let opts = ExecOptions {
            fault: Some(Fault::SkipLastFilterTile),
            ..Default::default()
        };
        let (out, _) = conv_direct_with(&input, &packed, &p, &shape, &m, &opts).unwrap();
        let naive = conv_naive(&input, &filters, &shape).unwrap();
        assert!(max_relative_error(out.as_slice(), naive.as_slice()) > 1e-5);
    }

    fn small_plan(num_in: usize, num_fs: usize) -> (ConvShape, MachineSpec, TilingStrategy) {
        let m = MachineSpec::power10();
        // 1x1 filters, num_in * 16 windows on one row, num_fs * 8 filters.
        let shape = ConvShape {
            in_h: 1,
            in_w: num_in * 16,
            ..ConvShape::square(4, 1, num_fs * 8, 1, 1, 0)
        };
        let p = csa::plan(&shape, &m).unwrap();
        (shape, m, p)
    }

    fn labels(trace: &TileTrace) -> Vec<String> {
        trace
            .events
            .iter()
            .map(|e| match e.kind {
                TileKind::Input => format!("IN{}", e.tile),
                TileKind::Filter => format!("FS{}", e.tile),
            })
            .collect()
    }

    #[test]
    fn trace_one_input_two_filters() {
        let (shape, m, p) = small_plan(1, 2);
        let s = with_k(p, Schedule::InputStationary, 2, 1);
        assert_eq!(labels(&emit_tile_trace(&s, &shape, &m).unwrap()), ["IN0", "FS0", "FS1"]);
    }

    #[test]
    fn trace_follows_layer_order() {
        let (shape, m, p) = small_plan(2, 2);
        let s = with_k(p, Schedule::InputStationary, 1, 2);
        assert_eq!(
            labels(&emit_tile_trace(&s, &shape, &m).unwrap()),
            ["IN0", "FS0", "IN1", "FS0", "IN0", "FS1", "IN1", "FS1"]
        );
        let ws = with_k(s, Schedule::WeightStationary, 2, 1);
        assert_eq!(
            labels(&emit_tile_trace(&ws, &shape, &m).unwrap()),
            ["IN0", "IN1", "FS0", "IN0", "IN1", "IN0", "IN1", "FS1", "IN0", "IN1"]
        );
    }

    #[test]
    fn trace_length_matches_instrumented_run() {
        let m = MachineSpec::power10();
        let shape = ConvShape::square(40, 14, 40, 3, 1, 1);
        let p = csa::plan(&shape, &m).unwrap();
        for (k2, k3) in [(5, 13), (2, 4), (1, 1)] {
            let s = with_k(p.clone(), Schedule::InputStationary, k2, k3);
            let trace = emit_tile_trace(&s, &shape, &m).unwrap();
            let (_, _, stats) = run(&shape, &m, &s, 10);
            // One input touch per pack, one filter touch per kernel call.
            assert_eq!(trace.events.len() as u64, stats.tile_pack_count + stats.microkernel_calls);
            let c = &p.counts;
            let per_set = c.num_in_t * c.num_fs_t.div_ceil(k2) + c.num_in_t * c.num_fs_t;
            assert_eq!(trace.events.len(), c.num_channel_sets * per_set);
        }
    }
}
