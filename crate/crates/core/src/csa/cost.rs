use serde::{Deserialize, Serialize};

use super::{CacheDistribution, Schedule, TileCounts, TileSizes};
use crate::machine::MachineSpec;

/// Line loads per memory level and their weighted cycle total.
///
/// Output-tile reloads and L1 hits are outside the model: both are the same
/// under either schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    /// Cold misses: every tile of every channel set once.
    pub n_dram1: u64,
    /// Streamed tiles reloaded from DRAM for each additional stationary set.
    pub n_dram2: u64,
    /// Stationary tiles reloaded from L3 for each additional streamed set.
    pub n_l3: u64,
    /// Streamed tiles served from L2.
    pub n_l2: u64,
    pub c_total: u64,
}

impl CostBreakdown {
    pub fn n_dram(&self) -> u64 {
        self.n_dram1 + self.n_dram2
    }
}

/// Evaluates the analytic cost for an already-solved cache distribution.
///
/// Tile-count ratios round up and "fit" terms clamp at zero. Each tile is
/// charged `ceil(bytes / line)` lines, so edge tiles cost as much as full ones.
pub fn cost_model(
    sizes: &TileSizes,
    counts: &TileCounts,
    dist: &CacheDistribution,
    machine: &MachineSpec,
    schedule: Schedule,
) -> CostBreakdown {
    let sets = counts.num_channel_sets as u64;
    let in_lines = machine.lines(sizes.in_t_bytes);
    let fs_lines = machine.lines(sizes.fs_t_bytes);

    let n_dram1 = sets * (counts.num_in_t as u64 * in_lines + counts.num_fs_t as u64 * fs_lines);

    // Stationary operand (IN for IS) and streamed operand (FS for IS).
    let (num_stat, stat_lines, num_moving, moving_lines) = match schedule {
        Schedule::InputStationary => (counts.num_in_t as u64, in_lines, counts.num_fs_t as u64, fs_lines),
        Schedule::WeightStationary => (counts.num_fs_t as u64, fs_lines, counts.num_in_t as u64, in_lines),
    };
    let moving_sets = num_moving.div_ceil(dist.k2 as u64);
    let stat_sets = num_stat.div_ceil(dist.k3 as u64);

    let moving_fitmin = moving_sets.saturating_sub(1).min(1);
    let stat_fit = stat_sets.saturating_sub(1);
    let n_dram2 = sets * moving_fitmin * stat_fit * num_moving * moving_lines;

    let moving_fit = moving_sets.saturating_sub(1);
    let n_l3 = sets * moving_fit * num_stat * stat_lines;

    let n_l2 = sets * num_stat.saturating_sub(1) * num_moving * moving_lines;

    let c_total = machine.cost_dram * (n_dram1 + n_dram2) + machine.cost_l3 * n_l3 + machine.cost_l2 * n_l2;
    CostBreakdown {
        n_dram1,
        n_dram2,
        n_l3,
        n_l2,
        c_total,
    }
}
