use std::time::Instant;

use anyhow::anyhow;
use clap::{Args, ValueEnum};

use sconv::baseline::{conv_im2col, conv_pointwise_gemm, GemmBlocking};
use sconv::executor::{conv_direct_with, ExecOptions, ExecutionStats};
use sconv::layers::LayerSpec;
use sconv::microkernel::Backend;
use sconv::packing::pack_filters;
use sconv::rng::layer_tensors;
use sconv::tensor::max_relative_error;
use sconv::{MachineSpec, Tensor3};

use crate::report::{BenchAggregate, BenchEntry, BenchReport, LayerError, MethodTiming};
use crate::{emit, input_err, layer_error, load_inputs, plan_layer, table, BackendArg, Common, TOLERANCE};

#[derive(Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value_t = BaselineArg::Im2col)]
    pub baseline: BaselineArg,
    /// Timed repeats per layer, after one discarded warm-up run.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub repeat: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = BackendArg::Reference)]
    pub microkernel: BackendArg,
    /// Disable vector-based input packing.
    #[arg(long)]
    pub no_vbp: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    Im2col,
}

fn timed<T>(
    repeat: usize,
    mut f: impl FnMut() -> sconv::Result<(T, ExecutionStats)>,
) -> sconv::Result<(T, Vec<ExecutionStats>)> {
    f()?;
    let mut runs = Vec::with_capacity(repeat);
    let mut last = None;
    for _ in 0..repeat {
        let (out, stats) = f()?;
        runs.push(stats);
        last = Some(out);
    }
    Ok((last.expect("repeat >= 1"), runs))
}

fn bench_layer(
    args: &BenchArgs,
    machine: &MachineSpec,
    index: usize,
    layer: &LayerSpec,
) -> Result<BenchEntry, LayerError> {
    let err = |e: sconv::Error| layer_error(index, layer, e);
    let shape = &layer.shape;
    let repeat = args.repeat as usize;
    let backend: Backend = args.microkernel.into();
    let plan = plan_layer(layer, machine, args.common.schedule).map_err(err)?;
    let (input, filters) = layer_tensors(shape, args.seed, index as u64);

    let start = Instant::now();
    let packed = pack_filters(&filters, machine.nf, plan.sizes.n_c).map_err(err)?;
    let filter_pack_s = start.elapsed().as_secs_f64();

    let options = ExecOptions {
        backend,
        vbp: !args.no_vbp,
        fault: None,
    };
    let (direct_out, direct_runs): (Tensor3, _) =
        timed(repeat, || conv_direct_with(&input, &packed, &plan, shape, machine, &options)).map_err(err)?;

    let blocking = GemmBlocking::for_machine(machine);
    let (base_out, base_runs) = match args.baseline {
        BaselineArg::Im2col => timed(repeat, || conv_im2col(&input, &filters, shape, blocking, backend)).map_err(err)?,
    };
    let direct_gemm = if shape.is_pointwise() {
        let (_, runs) = timed(repeat, || conv_pointwise_gemm(&input, &filters, shape, blocking, backend)).map_err(err)?;
        Some(MethodTiming::of(&runs))
    } else {
        None
    };

    let sconv = MethodTiming::of(&direct_runs);
    let baseline = MethodTiming::of(&base_runs);
    Ok(BenchEntry {
        index,
        label: layer.label(index),
        shape: *shape,
        schedule: plan.schedule,
        pack_store_ratio: sconv.pack_store_count as f64 / baseline.pack_store_count as f64,
        speedup: baseline.total.mean_s / sconv.total.mean_s,
        max_rel_error: max_relative_error(direct_out.as_slice(), base_out.as_slice()),
        sconv,
        filter_pack_s,
        baseline,
        direct_gemm,
    })
}

pub fn cmd_bench(args: &BenchArgs) -> anyhow::Result<bool> {
    let inputs = load_inputs(&args.common)?;
    let backend: Backend = args.microkernel.into();
    if !backend.is_available() {
        return Err(input_err(anyhow!("this build has no accelerated micro-kernel")));
    }
    let mut layers = Vec::new();
    let mut errors = Vec::new();
    for (index, layer) in inputs.layers.iter().enumerate() {
        match bench_layer(args, &inputs.machine, index, layer) {
            Ok(e) => layers.push(e),
            Err(e) => errors.push(e),
        }
    }

    let sum = |f: fn(&BenchEntry) -> f64| layers.iter().map(f).sum::<f64>();
    let sconv_total_s = sum(|e| e.sconv.total.mean_s);
    let baseline_total_s = sum(|e| e.baseline.total.mean_s);
    let sconv_pack_stores: u64 = layers.iter().map(|e| e.sconv.pack_store_count).sum();
    let baseline_pack_stores: u64 = layers.iter().map(|e| e.baseline.pack_store_count).sum();
    let aggregate = BenchAggregate {
        layers: layers.len(),
        sconv_total_s,
        baseline_total_s,
        speedup: baseline_total_s / sconv_total_s,
        sconv_pack_s: sum(|e| e.sconv.pack.mean_s),
        baseline_pack_s: sum(|e| e.baseline.pack.mean_s),
        sconv_pack_stores,
        baseline_pack_stores,
        pack_store_ratio: sconv_pack_stores as f64 / baseline_pack_stores as f64,
    };
    let report = BenchReport {
        command: "bench".into(),
        machine_source: inputs.machine_source.clone(),
        machine: inputs.machine.clone(),
        baseline: "im2col".into(),
        microkernel: match backend {
            Backend::Reference => "reference".into(),
            Backend::Accelerated => "accelerated".into(),
        },
        seed: args.seed,
        repeat: args.repeat as usize,
        warmup_discarded: true,
        layers,
        errors,
        aggregate,
    };
    emit(&report, &args.common, || table::bench(&report))?;
    if let Some(first) = report.errors.first() {
        return Err(input_err(anyhow!(
            "{} layer(s) failed; first: layer {} ({}): {}",
            report.errors.len(),
            first.index,
            first.label,
            first.error
        )));
    }
    let mut ok = true;
    for e in report.layers.iter().filter(|e| e.max_rel_error > TOLERANCE) {
        eprintln!("layer {} ({}): outputs differ from the baseline by {:e}", e.index, e.label, e.max_rel_error);
        ok = false;
    }
    Ok(ok)
}
