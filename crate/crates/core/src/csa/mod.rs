//! Convolution slicing analysis: pick the channel-set size, the number of
//! tiles held in L2/L3, and the input- or weight-stationary schedule.
//!
//! All constraint checks are integer comparisons against byte budgets
//! `floor(fraction * capacity)`. Every parameter is searched by halving from
//! its largest admissible value until its constraint holds.

mod cost;

pub use cost::{cost_model, CostBreakdown};

use serde::{Deserialize, Serialize};

use crate::error::{CacheLevel, Error, Result};
use crate::machine::MachineSpec;
use crate::shape::ConvShape;

/// Which operand stays resident in L1 while the other is swept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Schedule {
    #[serde(rename = "IS")]
    InputStationary,
    #[serde(rename = "WS")]
    WeightStationary,
}

impl Schedule {
    pub fn short(self) -> &'static str {
        match self {
            Schedule::InputStationary => "IS",
            Schedule::WeightStationary => "WS",
        }
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSizes {
    pub in_t_bytes: u64,
    pub fs_t_bytes: u64,
    pub out_t_bytes: u64,
    pub n_c: usize,
    pub n_win: usize,
    pub n_f: usize,
}

impl TileSizes {
    pub fn l1_footprint(&self) -> u64 {
        self.in_t_bytes + self.fs_t_bytes + self.out_t_bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileCounts {
    pub num_in_t: usize,
    pub num_fs_t: usize,
    pub num_out_t: usize,
    pub num_channel_sets: usize,
}

/// Tiles held in L2 (`k2`) and L3 (`k3`) for one schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheDistribution {
    pub k2: usize,
    pub k3: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilingStrategy {
    pub sizes: TileSizes,
    pub counts: TileCounts,
    /// `k2`/`k3` of the selected schedule.
    pub k2: usize,
    pub k3: usize,
    pub schedule: Schedule,
    pub cost_is: CostBreakdown,
    pub cost_ws: CostBreakdown,
    pub dist_is: CacheDistribution,
    pub dist_ws: CacheDistribution,
}

impl TilingStrategy {
    /// The same plan executed under `schedule` (with that schedule's K values).
    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        let dist = match schedule {
            Schedule::InputStationary => self.dist_is,
            Schedule::WeightStationary => self.dist_ws,
        };
        self.schedule = schedule;
        self.k2 = dist.k2;
        self.k3 = dist.k3;
        self
    }

    /// Replaces the K values of `schedule`, recomputes its cost and selects
    /// it. The caller is responsible for the cache constraints.
    pub fn with_distribution(mut self, schedule: Schedule, dist: CacheDistribution, machine: &MachineSpec) -> Self {
        let cost = cost_model(&self.sizes, &self.counts, &dist, machine, schedule);
        match schedule {
            Schedule::InputStationary => {
                self.dist_is = dist;
                self.cost_is = cost;
            }
            Schedule::WeightStationary => {
                self.dist_ws = dist;
                self.cost_ws = cost;
            }
        }
        self.with_schedule(schedule)
    }

    pub fn cost(&self) -> &CostBreakdown {
        match self.schedule {
            Schedule::InputStationary => &self.cost_is,
            Schedule::WeightStationary => &self.cost_ws,
        }
    }

    /// Checks that this strategy was planned for `shape` on `machine`.
    pub fn check_compatible(&self, shape: &ConvShape, machine: &MachineSpec) -> Result<()> {
        let mismatch = |what: String| Err(Error::StrategyMismatch(what));
        let n_c = self.sizes.n_c;
        if n_c == 0 || n_c > shape.in_c {
            return mismatch(format!("n_c={n_c} outside 1..={}", shape.in_c));
        }
        let sizes = tile_sizes(shape, machine, n_c);
        if sizes != self.sizes {
            return mismatch(format!("tile sizes {:?} != expected {:?}", self.sizes, sizes));
        }
        let counts = tile_counts(shape, machine, n_c);
        if counts != self.counts {
            return mismatch(format!("tile counts {:?} != expected {:?}", self.counts, counts));
        }
        let (k2_max, k3_max) = k_ceilings(&counts, self.schedule);
        if self.k2 == 0 || self.k2 > k2_max || self.k3 == 0 || self.k3 > k3_max {
            return mismatch(format!(
                "k2={} k3={} outside 1..={k2_max} / 1..={k3_max}",
                self.k2, self.k3
            ));
        }
        Ok(())
    }
}

/// `start, start/2, start/4, ..., 1`.
pub fn halving_sequence(start: usize) -> impl Iterator<Item = usize> {
    std::iter::successors(Some(start.max(1)), |&v| (v > 1).then_some(v / 2))
}

/// Tile byte sizes for a channel-set size of `n_c`.
pub fn tile_sizes(shape: &ConvShape, machine: &MachineSpec, n_c: usize) -> TileSizes {
    let dt = shape.dt_bytes as u64;
    let window = (shape.f_h * shape.f_w) as u64;
    let (n_win, n_f) = (machine.nwin, machine.nf);
    TileSizes {
        in_t_bytes: n_win as u64 * n_c as u64 * window * dt,
        fs_t_bytes: n_f as u64 * n_c as u64 * window * dt,
        out_t_bytes: n_win as u64 * n_f as u64 * dt,
        n_c,
        n_win,
        n_f,
    }
}

pub fn tile_counts(shape: &ConvShape, machine: &MachineSpec, n_c: usize) -> TileCounts {
    let num_in_t = shape.num_windows().div_ceil(machine.nwin);
    let num_fs_t = shape.out_c.div_ceil(machine.nf);
    TileCounts {
        num_in_t,
        num_fs_t,
        num_out_t: num_in_t * num_fs_t,
        num_channel_sets: shape.in_c.div_ceil(n_c),
    }
}

/// Largest value in the halving sequence from `in_c` whose tiles fit the L1 budget.
pub fn solve_nc(shape: &ConvShape, machine: &MachineSpec) -> Result<usize> {
    let budget = machine.l1_budget();
    halving_sequence(shape.in_c)
        .find(|&n_c| tile_sizes(shape, machine, n_c).l1_footprint() <= budget)
        .ok_or_else(|| Error::UnplannableL1 {
            needed: tile_sizes(shape, machine, 1).l1_footprint(),
            budget,
        })
}

/// Tile bytes of the stationary and streamed operands.
struct Roles {
    stat_bytes: u64,
    moving_bytes: u64,
    out_bytes: u64,
}

fn roles(sizes: &TileSizes, schedule: Schedule) -> Roles {
    let (stat_bytes, moving_bytes) = match schedule {
        Schedule::InputStationary => (sizes.in_t_bytes, sizes.fs_t_bytes),
        Schedule::WeightStationary => (sizes.fs_t_bytes, sizes.in_t_bytes),
    };
    Roles {
        stat_bytes,
        moving_bytes,
        out_bytes: sizes.out_t_bytes,
    }
}

/// Upper bounds `(k2, k3)`: the streamed and stationary tile counts.
pub fn k_ceilings(counts: &TileCounts, schedule: Schedule) -> (usize, usize) {
    match schedule {
        Schedule::InputStationary => (counts.num_fs_t, counts.num_in_t),
        Schedule::WeightStationary => (counts.num_in_t, counts.num_fs_t),
    }
}

/// L2 footprint: one stationary tile plus `k2` streamed tiles and their outputs.
pub fn l2_footprint(sizes: &TileSizes, schedule: Schedule, k2: usize) -> u64 {
    let r = roles(sizes, schedule);
    r.stat_bytes + k2 as u64 * (r.moving_bytes + r.out_bytes)
}

/// L3 footprint: `k3` stationary, `k2` streamed and all `k2*k3` outputs.
pub fn l3_footprint(sizes: &TileSizes, schedule: Schedule, k2: usize, k3: usize) -> u64 {
    let r = roles(sizes, schedule);
    let (k2, k3) = (k2 as u64, k3 as u64);
    k3 * r.stat_bytes + k2 * r.moving_bytes + k2 * k3 * r.out_bytes
}

pub fn solve_k2_k3(
    sizes: &TileSizes,
    counts: &TileCounts,
    machine: &MachineSpec,
    schedule: Schedule,
) -> Result<CacheDistribution> {
    let (k2_max, k3_max) = k_ceilings(counts, schedule);

    let l2_budget = machine.l2_budget();
    let k2 = halving_sequence(k2_max)
        .find(|&k2| l2_footprint(sizes, schedule, k2) <= l2_budget)
        .ok_or(Error::UnplannableL2 {
            needed: l2_footprint(sizes, schedule, 1),
            budget: l2_budget,
        })?;

    let l3_budget = machine.l3_budget();
    let k3 = halving_sequence(k3_max)
        .find(|&k3| l3_footprint(sizes, schedule, k2, k3) <= l3_budget)
        .ok_or(Error::UnplannableL3 {
            needed: l3_footprint(sizes, schedule, k2, 1),
            budget: l3_budget,
        })?;

    Ok(CacheDistribution { k2, k3 })
}

/// Plans both schedules and keeps the cheaper one (ties go to input-stationary).
pub fn plan(shape: &ConvShape, machine: &MachineSpec) -> Result<TilingStrategy> {
    shape.validate()?;
    machine.validate()?;
    if shape.dt_bytes != machine.dt_bytes {
        return Err(Error::InvalidShape {
            field: "dt_bytes",
            reason: format!("{} does not match machine dt_bytes {}", shape.dt_bytes, machine.dt_bytes),
        });
    }

    let n_c = solve_nc(shape, machine)?;
    let sizes = tile_sizes(shape, machine, n_c);
    let counts = tile_counts(shape, machine, n_c);

    let dist_is = solve_k2_k3(&sizes, &counts, machine, Schedule::InputStationary)?;
    let dist_ws = solve_k2_k3(&sizes, &counts, machine, Schedule::WeightStationary)?;
    let cost_is = cost_model(&sizes, &counts, &dist_is, machine, Schedule::InputStationary);
    let cost_ws = cost_model(&sizes, &counts, &dist_ws, machine, Schedule::WeightStationary);

    let schedule = if cost_ws.c_total < cost_is.c_total {
        Schedule::WeightStationary
    } else {
        Schedule::InputStationary
    };
    let chosen = match schedule {
        Schedule::InputStationary => dist_is,
        Schedule::WeightStationary => dist_ws,
    };
    Ok(TilingStrategy {
        sizes,
        counts,
        k2: chosen.k2,
        k3: chosen.k3,
        schedule,
        cost_is,
        cost_ws,
        dist_is,
        dist_ws,
    })
}

/// Which budget a plan's constraint is checked against.
pub fn budget(machine: &MachineSpec, level: CacheLevel) -> u64 {
    match level {
        CacheLevel::L1 => machine.l1_budget(),
        CacheLevel::L2 => machine.l2_budget(),
        CacheLevel::L3 => machine.l3_budget(),
    }
}
