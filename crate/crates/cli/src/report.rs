//! JSON report types. Field names are the published schema in `schema/`.

use serde::Serialize;

use sconv::cachesim::SimReport;
use sconv::csa::{CacheDistribution, CostBreakdown, Schedule, TileCounts, TileSizes, TilingStrategy};
use sconv::executor::ExecutionStats;
use sconv::layers::LayerSpec;
use sconv::{ConvShape, MachineSpec};

#[derive(Debug, Serialize)]
pub struct LayerError {
    pub index: usize,
    pub label: String,
    pub error: String,
}

#[derive(Debug, Serialize)]
pub struct PlanReport {
    pub command: String,
    pub machine_source: String,
    pub machine: MachineSpec,
    pub layers: Vec<PlanEntry>,
    pub errors: Vec<LayerError>,
}

#[derive(Debug, Serialize)]
pub struct PlanEntry {
    pub index: usize,
    pub label: String,
    pub shape: ConvShape,
    pub schedule: Schedule,
    /// What the planner picked before any `--schedule` override.
    pub auto_schedule: Schedule,
    pub n_c: usize,
    pub k2: usize,
    pub k3: usize,
    pub sizes: TileSizes,
    pub counts: TileCounts,
    pub dist_is: CacheDistribution,
    pub dist_ws: CacheDistribution,
    pub cost_is: CostBreakdown,
    pub cost_ws: CostBreakdown,
}

impl PlanEntry {
    pub fn new(index: usize, layer: &LayerSpec, auto_schedule: Schedule, plan: TilingStrategy) -> Self {
        PlanEntry {
            index,
            label: layer.label(index),
            shape: layer.shape,
            schedule: plan.schedule,
            auto_schedule,
            n_c: plan.sizes.n_c,
            k2: plan.k2,
            k3: plan.k3,
            sizes: plan.sizes,
            counts: plan.counts,
            dist_is: plan.dist_is,
            dist_ws: plan.dist_ws,
            cost_is: plan.cost_is,
            cost_ws: plan.cost_ws,
        }
    }
}

/// [`ExecutionStats`] with times in seconds.
#[derive(Debug, Clone, Serialize)]
pub struct StatsJson {
    pub total_s: f64,
    pub pack_s: f64,
    pub microkernel_s: f64,
    pub other_s: f64,
    pub pack_store_count: u64,
    pub tile_pack_count: u64,
    pub microkernel_calls: u64,
    pub workspace_bytes: u64,
}

impl From<ExecutionStats> for StatsJson {
    fn from(s: ExecutionStats) -> Self {
        StatsJson {
            total_s: s.total_time.as_secs_f64(),
            pack_s: s.pack_time.as_secs_f64(),
            microkernel_s: s.microkernel_time.as_secs_f64(),
            other_s: s.other_time.as_secs_f64(),
            pack_store_count: s.pack_store_count,
            tile_pack_count: s.tile_pack_count,
            microkernel_calls: s.microkernel_calls,
            workspace_bytes: s.workspace_bytes,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    pub machine_source: String,
    pub machine: MachineSpec,
    pub seed: u64,
    pub verify: bool,
    pub tolerance: f64,
    pub layers: Vec<RunEntry>,
    pub errors: Vec<LayerError>,
    pub all_passed: bool,
}

#[derive(Debug, Serialize)]
pub struct RunEntry {
    pub index: usize,
    pub label: String,
    pub shape: ConvShape,
    pub schedule: Schedule,
    pub output_dims: [usize; 3],
    pub output_sha256: String,
    pub stats: StatsJson,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_rel_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub passed: Option<bool>,
}

#[derive(Debug, Serialize)]
pub struct SimReportFile {
    pub command: String,
    pub machine_source: String,
    pub machine: MachineSpec,
    pub layers: Vec<SimEntry>,
    pub errors: Vec<LayerError>,
    pub all_identities_hold: bool,
}

#[derive(Debug, Serialize)]
pub struct SimEntry {
    pub index: usize,
    pub label: String,
    pub shape: ConvShape,
    pub k2: usize,
    pub k3: usize,
    pub cold_misses_exact: bool,
    pub zero_reload_identity: bool,
    pub sim: SimReport,
}

/// Mean and sample standard deviation over the timed repeats.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Timing {
    pub mean_s: f64,
    pub std_s: f64,
}

impl Timing {
    pub fn of(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = if samples.len() > 1 {
            samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Timing {
            mean_s: mean,
            std_s: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodTiming {
    pub total: Timing,
    pub pack: Timing,
    pub microkernel: Timing,
    pub other: Timing,
    pub pack_store_count: u64,
    pub microkernel_calls: u64,
    pub workspace_bytes: u64,
}

impl MethodTiming {
    pub fn of(runs: &[ExecutionStats]) -> Self {
        let series = |f: fn(&ExecutionStats) -> f64| Timing::of(&runs.iter().map(f).collect::<Vec<_>>());
        let last = runs.last().expect("at least one timed run");
        MethodTiming {
            total: series(|s| s.total_time.as_secs_f64()),
            pack: series(|s| s.pack_time.as_secs_f64()),
            microkernel: series(|s| s.microkernel_time.as_secs_f64()),
            other: series(|s| s.other_time.as_secs_f64()),
            pack_store_count: last.pack_store_count,
            microkernel_calls: last.microkernel_calls,
            workspace_bytes: last.workspace_bytes,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct BenchEntry {
    pub index: usize,
    pub label: String,
    pub shape: ConvShape,
    pub schedule: Schedule,
    pub sconv: MethodTiming,
    /// One-off filter packing, outside the timed runs.
    pub filter_pack_s: f64,
    pub baseline: MethodTiming,
    /// GEMM directly on the input, for 1x1 stride-1 layers.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direct_gemm: Option<MethodTiming>,
    /// sconv / baseline pack stores.
    pub pack_store_ratio: f64,
    /// baseline / sconv mean total time.
    pub speedup: f64,
    /// Between the two outputs of the last repeat.
    pub max_rel_error: f64,
}

#[derive(Debug, Serialize)]
pub struct BenchAggregate {
    pub layers: usize,
    pub sconv_total_s: f64,
    pub baseline_total_s: f64,
    pub speedup: f64,
    pub sconv_pack_s: f64,
    pub baseline_pack_s: f64,
    pub sconv_pack_stores: u64,
    pub baseline_pack_stores: u64,
    pub pack_store_ratio: f64,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub command: String,
    pub machine_source: String,
    pub machine: MachineSpec,
    pub baseline: String,
    pub microkernel: String,
    pub seed: u64,
    pub repeat: usize,
    pub warmup_discarded: bool,
    pub layers: Vec<BenchEntry>,
    pub errors: Vec<LayerError>,
    pub aggregate: BenchAggregate,
}
