//! Tile-granularity LRU replay of an executor trace.
//!
//! Each level is fully associative with capacity `fraction * bytes` and
//! holds whole tiles. The hierarchy is inclusive: evicting a tile from L3
//! also drops it from L2 and L1, and evicting from L2 drops it from L1.
//! A touch that misses L1 is charged `ceil(bytes / line)` lines at the first
//! level holding the tile (DRAM if none); every touch then refreshes or
//! installs the tile at all three levels.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::csa::{CostBreakdown, Schedule};
use crate::error::{CacheLevel, Error, Result};
use crate::executor::{TileKind, TileTouch, TileTrace};
use crate::machine::MachineSpec;

type TileKey = (TileKind, usize, usize);

fn key(t: &TileTouch) -> TileKey {
    (t.kind, t.channel_set, t.tile)
}

/// One fully associative LRU level.
#[derive(Debug, Clone)]
pub struct SimCache {
    level: CacheLevel,
    capacity_bytes: u64,
    used_bytes: u64,
    resident: HashMap<TileKey, (u64, u64)>,
    by_age: BTreeMap<u64, TileKey>,
}

impl SimCache {
    pub fn new(level: CacheLevel, capacity_bytes: u64) -> Self {
        SimCache {
            level,
            capacity_bytes,
            used_bytes: 0,
            resident: HashMap::new(),
            by_age: BTreeMap::new(),
        }
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    pub fn used_bytes(&self) -> u64 {
        self.used_bytes
    }

    pub fn len(&self) -> usize {
        self.resident.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resident.is_empty()
    }

    fn contains(&self, k: &TileKey) -> bool {
        self.resident.contains_key(k)
    }

    fn remove(&mut self, k: &TileKey) {
        if let Some((stamp, bytes)) = self.resident.remove(k) {
            self.by_age.remove(&stamp);
            self.used_bytes -= bytes;
        }
    }

    /// Marks `k` most recently used, evicting as needed. Returns the evicted tiles.
    fn touch(&mut self, k: TileKey, bytes: u64, stamp: u64) -> Vec<TileKey> {
        let mut evicted = Vec::new();
        if let Some((old, _)) = self.resident.get_mut(&k) {
            self.by_age.remove(old);
            *old = stamp;
            self.by_age.insert(stamp, k);
            return evicted;
        }
        while self.used_bytes + bytes > self.capacity_bytes {
            let (_, victim) = self.by_age.pop_first().expect("capacity checked against tile size");
            let (_, b) = self.resident.remove(&victim).expect("age index in sync");
            self.used_bytes -= b;
            evicted.push(victim);
        }
        self.resident.insert(k, (stamp, bytes));
        self.by_age.insert(stamp, k);
        self.used_bytes += bytes;
        evicted
    }
}

/// Line counts charged to one tile kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCounts {
    pub touches: u64,
    pub l1_hits: u64,
    pub l2: u64,
    pub l3: u64,
    pub dram_cold: u64,
    pub dram_reload: u64,
}

/// `sim / model`, or a marker when the model predicts zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ratio {
    Value(f64),
    /// Both counts are zero.
    ExactZero,
    /// The model predicts zero but the simulator counted traffic.
    Unbounded,
}

impl Ratio {
    pub fn of(sim: u64, model: u64) -> Self {
        match (sim, model) {
            (0, 0) => Ratio::ExactZero,
            (_, 0) => Ratio::Unbounded,
            _ => Ratio::Value(sim as f64 / model as f64),
        }
    }

    /// True when the counts agree within `tolerance` relative to the model.
    pub fn within(self, tolerance: f64) -> bool {
        match self {
            Ratio::Value(v) => (v - 1.0).abs() <= tolerance,
            Ratio::ExactZero => true,
            Ratio::Unbounded => false,
        }
    }
}

impl std::fmt::Display for Ratio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Ratio::Value(v) => write!(f, "{v:.3}"),
            Ratio::ExactZero => f.write_str("exact-zero"),
            Ratio::Unbounded => f.write_str("unbounded"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimRatios {
    /// `sim_l2 / n_l2`.
    pub l2: Ratio,
    /// `sim_l3 / n_l3`.
    pub l3: Ratio,
    /// `sim_dram_cold / n_dram1`.
    pub dram_cold: Ratio,
    /// `sim_dram_reload / n_dram2`.
    pub dram_reload: Ratio,
    /// `sim_dram / (n_dram1 + n_dram2)`.
    pub dram: Ratio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub schedule: Schedule,
    pub touches: u64,
    pub sim_l2: u64,
    pub sim_l3: u64,
    pub sim_dram: u64,
    /// First touch of each tile.
    pub sim_dram_cold: u64,
    /// Touches of tiles that had been evicted from L3.
    pub sim_dram_reload: u64,
    pub input: KindCounts,
    pub filter: KindCounts,
    pub model: CostBreakdown,
    pub ratios: SimRatios,
}

impl SimReport {
    /// Simulated cold misses equal the model's exactly.
    pub fn cold_misses_exact(&self) -> bool {
        self.sim_dram_cold == self.model.n_dram1
    }

    /// When the model predicts no L3 or DRAM reloads, the simulator saw
    /// none of the streamed operand's reloads from DRAM and none of the
    /// stationary operand's reloads from L3.
    pub fn zero_reload_identity_holds(&self) -> bool {
        if self.model.n_l3 != 0 || self.model.n_dram2 != 0 {
            return true;
        }
        let (stationary, moving) = match self.schedule {
            Schedule::InputStationary => (&self.input, &self.filter),
            Schedule::WeightStationary => (&self.filter, &self.input),
        };
        moving.dram_reload == 0 && stationary.l3 == 0 && stationary.dram_reload == 0
    }
}

/// Replays `trace` through the scaled L1/L2/L3 of `machine`.
pub fn simulate(trace: &TileTrace, machine: &MachineSpec) -> Result<SimReport> {
    machine.validate()?;
    let mut levels = [
        SimCache::new(CacheLevel::L1, machine.l1_budget()),
        SimCache::new(CacheLevel::L2, machine.l2_budget()),
        SimCache::new(CacheLevel::L3, machine.l3_budget()),
    ];
    for t in &trace.events {
        for level in &levels {
            if t.bytes > level.capacity_bytes {
                let kind = match t.kind {
                    TileKind::Input => "input",
                    TileKind::Filter => "filter",
                };
                return Err(Error::TileTooLarge {
                    kind,
                    level: level.level,
                    bytes: t.bytes,
                    capacity: level.capacity_bytes,
                });
            }
        }
    }

    let mut seen: HashSet<TileKey> = HashSet::new();
    let mut input = KindCounts::default();
    let mut filter = KindCounts::default();
    for (stamp, t) in trace.events.iter().enumerate() {
        let k = key(t);
        let lines = machine.lines(t.bytes);
        let counts = match t.kind {
            TileKind::Input => &mut input,
            TileKind::Filter => &mut filter,
        };
        counts.touches += 1;
        if levels[0].contains(&k) {
            counts.l1_hits += 1;
        } else if levels[1].contains(&k) {
            counts.l2 += lines;
        } else if levels[2].contains(&k) {
            counts.l3 += lines;
        } else if seen.insert(k) {
            counts.dram_cold += lines;
        } else {
            counts.dram_reload += lines;
        }

        let stamp = stamp as u64;
        for victim in levels[2].touch(k, t.bytes, stamp) {
            levels[1].remove(&victim);
            levels[0].remove(&victim);
        }
        for victim in levels[1].touch(k, t.bytes, stamp) {
            levels[0].remove(&victim);
        }
        levels[0].touch(k, t.bytes, stamp);
    }

    let sim_l2 = input.l2 + filter.l2;
    let sim_l3 = input.l3 + filter.l3;
    let sim_dram_cold = input.dram_cold + filter.dram_cold;
    let sim_dram_reload = input.dram_reload + filter.dram_reload;
    let sim_dram = sim_dram_cold + sim_dram_reload;
    let model = trace.model;
    Ok(SimReport {
        schedule: trace.schedule,
        touches: trace.events.len() as u64,
        sim_l2,
        sim_l3,
        sim_dram,
        sim_dram_cold,
        sim_dram_reload,
        input,
        filter,
        model,
        ratios: SimRatios {
            l2: Ratio::of(sim_l2, model.n_l2),
            l3: Ratio::of(sim_l3, model.n_l3),
            dram_cold: Ratio::of(sim_dram_cold, model.n_dram1),
            dram_reload: Ratio::of(sim_dram_reload, model.n_dram2),
            dram: Ratio::of(sim_dram, model.n_dram()),
        },
    })
}
