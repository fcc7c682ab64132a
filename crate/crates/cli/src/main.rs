mod bench;
mod report;
mod table;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use sconv::baseline::conv_naive;
use sconv::cachesim::simulate;
use sconv::csa::{self, Schedule, TilingStrategy};
use sconv::executor::{conv_direct_with, emit_tile_trace, pad_input, ExecOptions, Fault};
use sconv::layers::{load_layers, LayerSpec};
use sconv::microkernel::Backend;
use sconv::packing::{self, pack_filters, InputTileCoords};
use sconv::rng::layer_tensors;
use sconv::tensor::max_relative_error;
use sconv::MachineSpec;

use report::{LayerError, PlanEntry, PlanReport, RunEntry, RunReport, SimEntry, SimReportFile};

/// Relative error above which `run --verify` fails a layer.
const TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "sconv", version, about = "Cache-aware direct convolution: planning, execution and cost-model checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the tiling plan of every layer.
    Plan {
        #[command(flatten)]
        common: Common,
    },
    /// Run every layer on pseudorandom data.
    Run(RunArgs),
    /// Time the direct path against Im2Col + GEMM.
    Bench(bench::BenchArgs),
    /// Replay each plan through the LRU cache model and compare with the cost model.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Layer-spec JSON file.
    #[arg(long)]
    layers: PathBuf,
    /// Machine-spec JSON file (default: built-in power10).
    #[arg(long, env = "SCONV_MACHINE")]
    machine: Option<PathBuf>,
    /// Override the planner's schedule choice.
    #[arg(long, value_enum, default_value_t = ScheduleArg::Auto)]
    schedule: ScheduleArg,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also print a text table (to stderr when the report goes to stdout).
    #[arg(long)]
    table: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Compare against the naive convolution.
    #[arg(long)]
    verify: bool,
    #[arg(long, value_enum, default_value_t = BackendArg::Reference)]
    microkernel: BackendArg,
    /// Disable vector-based input packing.
    #[arg(long)]
    no_vbp: bool,
    /// Print packed input tile N (first channel set) of each layer to stderr.
    #[arg(long, value_name = "N")]
    dump_tile: Option<usize>,
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<FaultArg>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScheduleArg {
    Auto,
    Is,
    Ws,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Reference,
    Accelerated,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Reference => Backend::Reference,
            BackendArg::Accelerated => Backend::Accelerated,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FaultArg {
    SkipLastFilterTile,
}

/// Bad input: exit code 2.
#[derive(Debug)]
struct InputError(anyhow::Error);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for InputError {}

fn input_err(e: impl Into<anyhow::Error>) -> anyhow::Error {
    InputError(e.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<InputError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

/// Returns whether every check passed.
fn dispatch(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Plan { common } => cmd_plan(&common),
        Command::Run(args) => cmd_run(&args),
        Command::Bench(args) => bench::cmd_bench(&args),
        Command::Simulate { common } => cmd_simulate(&common),
    }
}

struct Inputs {
    machine: MachineSpec,
    machine_source: String,
    layers: Vec<LayerSpec>,
}

fn load_inputs(common: &Common) -> anyhow::Result<Inputs> {
    let (machine, machine_source) = match &common.machine {
        Some(path) => (
            MachineSpec::load(path).map_err(input_err)?,
            path.display().to_string(),
        ),
        None => (MachineSpec::power10(), "builtin:power10".to_string()),
    };
    let layers = load_layers(&common.layers).map_err(input_err)?;
    if layers.is_empty() {
        return Err(input_err(anyhow::anyhow!("{} contains no layers", common.layers.display())));
    }
    Ok(Inputs {
        machine,
        machine_source,
        layers,
    })
}

fn apply_schedule(plan: TilingStrategy, schedule: ScheduleArg) -> TilingStrategy {
    match schedule {
        ScheduleArg::Auto => plan,
        ScheduleArg::Is => plan.with_schedule(Schedule::InputStationary),
        ScheduleArg::Ws => plan.with_schedule(Schedule::WeightStationary),
    }
}

fn plan_layer(layer: &LayerSpec, machine: &MachineSpec, schedule: ScheduleArg) -> sconv::Result<TilingStrategy> {
    csa::plan(&layer.shape, machine).map(|p| apply_schedule(p, schedule))
}

fn emit<T: serde::Serialize>(report: &T, common: &Common, table: impl FnOnce() -> String) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(report).context("serializing report")?;
    match &common.out {
        Some(path) => {
            write_file(path, &json)?;
            if common.table {
                print!("{}", table());
            }
        }
        None => {
            println!("{json}");
            if common.table {
                eprint!("{}", table());
            }
        }
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    let mut f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(f, "{text}").with_context(|| format!("writing {}", path.display()))
}

fn layer_error(index: usize, layer: &LayerSpec, e: impl std::fmt::Display) -> LayerError {
    LayerError {
        index,
        label: layer.label(index),
        error: e.to_string(),
    }
}

fn cmd_plan(common: &Common) -> anyhow::Result<bool> {
    let inputs = load_inputs(common)?;
    let mut report = PlanReport {
        command: "plan".into(),
        machine_source: inputs.machine_source.clone(),
        machine: inputs.machine.clone(),
        layers: Vec::new(),
        errors: Vec::new(),
    };
    for (index, layer) in inputs.layers.iter().enumerate() {
        match csa::plan(&layer.shape, &inputs.machine) {
            Ok(auto) => {
                let auto_schedule = auto.schedule;
                let plan = apply_schedule(auto, common.schedule);
                report.layers.push(PlanEntry::new(index, layer, auto_schedule, plan));
            }
            Err(e) => report.errors.push(layer_error(index, layer, e)),
        }
    }
    emit(&report, common, || table::plan(&report))?;
    if !report.errors.is_empty() {
        let first = &report.errors[0];
        return Err(input_err(anyhow::anyhow!(
            "{} layer(s) could not be planned; first: layer {} ({}): {}",
            report.errors.len(),
            first.index,
            first.label,
            first.error
        )));
    }
    Ok(true)
}

fn digest(values: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

fn run_layer(args: &RunArgs, machine: &MachineSpec, index: usize, layer: &LayerSpec) -> Result<RunEntry, LayerError> {
    let shape = &layer.shape;
    let plan = plan_layer(layer, machine, args.common.schedule).map_err(|e| layer_error(index, layer, e))?;
    let (input, filters) = layer_tensors(shape, args.seed, index as u64);
    let packed = pack_filters(&filters, machine.nf, plan.sizes.n_c).map_err(|e| layer_error(index, layer, e))?;

    if let Some(tile) = args.dump_tile {
        let text = dump_tile(shape, &plan, &input, tile).map_err(|e| layer_error(index, layer, e))?;
        eprintln!("layer {index} ({}) input tile {tile}:\n{text}", layer.label(index));
    }

    let options = ExecOptions {
        backend: args.microkernel.into(),
        vbp: !args.no_vbp,
        fault: args.inject_fault.map(|FaultArg::SkipLastFilterTile| Fault::SkipLastFilterTile),
    };
    let (out, stats) =
        conv_direct_with(&input, &packed, &plan, shape, machine, &options).map_err(|e| layer_error(index, layer, e))?;

    let max_rel_error = if args.verify {
        let naive = conv_naive(&input, &filters, shape).map_err(|e| layer_error(index, layer, e))?;
        Some(max_relative_error(out.as_slice(), naive.as_slice()))
    } else {
        None
    };
    Ok(RunEntry {
        index,
        label: layer.label(index),
        shape: *shape,
        schedule: plan.schedule,
        output_dims: out.dims(),
        output_sha256: digest(out.as_slice()),
        stats: stats.into(),
        max_rel_error,
        passed: max_rel_error.map(|e| e <= TOLERANCE),
    })
}

fn dump_tile(
    shape: &sconv::ConvShape,
    plan: &TilingStrategy,
    input: &sconv::Tensor3,
    tile: usize,
) -> anyhow::Result<String> {
    if tile >= plan.counts.num_in_t {
        bail!("tile {tile} out of range (layer has {} input tiles)", plan.counts.num_in_t);
    }
    let window_base = tile * plan.sizes.n_win;
    let coords = InputTileCoords {
        c_base: 0,
        nc: plan.sizes.n_c,
        window_base,
        nw: plan.sizes.n_win.min(shape.num_windows() - window_base),
    };
    let padded = pad_input(input, shape)?;
    let packed = packing::pack_input_tile(&padded, shape, coords)?;
    Ok(packing::dump_input_tile(&packed))
}

fn cmd_run(args: &RunArgs) -> anyhow::Result<bool> {
    let inputs = load_inputs(&args.common)?;
    let backend: Backend = args.microkernel.into();
    if !backend.is_available() {
        return Err(input_err(anyhow::anyhow!("this build has no accelerated micro-kernel")));
    }
    let machine = &inputs.machine;
    let results: Vec<Result<RunEntry, LayerError>> = if args.verify {
        inputs
            .layers
            .par_iter()
            .enumerate()
            .map(|(i, l)| run_layer(args, machine, i, l))
            .collect()
    } else {
        inputs
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| run_layer(args, machine, i, l))
            .collect()
    };
    let mut report = RunReport {
        command: "run".into(),
        machine_source: inputs.machine_source.clone(),
        machine: machine.clone(),
        seed: args.seed,
        verify: args.verify,
        tolerance: TOLERANCE,
        layers: Vec::new(),
        errors: Vec::new(),
        all_passed: true,
    };
    for r in results {
        match r {
            Ok(entry) => {
                if entry.passed == Some(false) {
                    report.all_passed = false;
                }
                report.layers.push(entry);
            }
            Err(e) => report.errors.push(e),
        }
    }
    if !report.errors.is_empty() {
        report.all_passed = false;
    }
    emit(&report, &args.common, || table::run(&report))?;
    if let Some(first) = report.errors.first() {
        return Err(input_err(anyhow::anyhow!(
            "{} layer(s) failed; first: layer {} ({}): {}",
            report.errors.len(),
            first.index,
            first.label,
            first.error
        )));
    }
    for e in report.layers.iter().filter(|e| e.passed == Some(false)) {
        eprintln!(
            "verification failed: layer {} ({}): max relative error {:e} > {TOLERANCE:e}",
            e.index,
            e.label,
            e.max_rel_error.unwrap_or(f64::NAN)
        );
    }
    Ok(report.all_passed)
}

fn cmd_simulate(common: &Common) -> anyhow::Result<bool> {
    let inputs = load_inputs(common)?;
    let machine = &inputs.machine;
    let mut report = SimReportFile {
        command: "simulate".into(),
        machine_source: inputs.machine_source.clone(),
        machine: machine.clone(),
        layers: Vec::new(),
        errors: Vec::new(),
        all_identities_hold: true,
    };
    for (index, layer) in inputs.layers.iter().enumerate() {
        let sim = plan_layer(layer, machine, common.schedule).and_then(|plan| {
            let trace = emit_tile_trace(&plan, &layer.shape, machine)?;
            Ok((plan, simulate(&trace, machine)?))
        });
        match sim {
            Ok((plan, sim)) => {
                let cold_misses_exact = sim.cold_misses_exact();
                let zero_reload_identity = sim.zero_reload_identity_holds();
                report.all_identities_hold &= cold_misses_exact && zero_reload_identity;
                report.layers.push(SimEntry {
                    index,
                    label: layer.label(index),
                    shape: layer.shape,
                    k2: plan.k2,
                    k3: plan.k3,
                    cold_misses_exact,
                    zero_reload_identity,
                    sim,
                });
            }
            Err(e) => report.errors.push(layer_error(index, layer, e)),
        }
    }
    emit(&report, common, || table::simulate(&report))?;
    if let Some(first) = report.errors.first() {
        return Err(input_err(anyhow::anyhow!(
            "{} layer(s) could not be simulated; first: layer {} ({}): {}",
            report.errors.len(),
            first.index,
            first.label,
            first.error
        )));
    }
    for e in report.layers.iter().filter(|e| !(e.cold_misses_exact && e.zero_reload_identity)) {
        eprintln!("identity check failed: layer {} ({})", e.index, e.label);
    }
    Ok(report.all_identities_hold)
}
