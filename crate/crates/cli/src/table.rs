//! Plain-text tables for `--table`.

use std::fmt::Write;

use crate::report::{BenchReport, PlanReport, RunReport, SimReportFile};

fn ms(s: f64) -> String {
    format!("{:.3}", s * 1e3)
}

pub fn plan(r: &PlanReport) -> String {
    let mut t = String::new();
    writeln!(t, "{:>4}  {:<32} {:>5} {:>5} {:>5} {:>4} {:>14} {:>14}", "#", "layer", "n_c", "k2", "k3", "sch", "cost IS", "cost WS").unwrap();
    for e in &r.layers {
        writeln!(
            t,
            "{:>4}  {:<32} {:>5} {:>5} {:>5} {:>4} {:>14} {:>14}",
            e.index, e.label, e.n_c, e.k2, e.k3, e.schedule, e.cost_is.c_total, e.cost_ws.c_total
        )
        .unwrap();
    }
    for e in &r.errors {
        writeln!(t, "{:>4}  {:<32} error: {}", e.index, e.label, e.error).unwrap();
    }
    t
}

pub fn run(r: &RunReport) -> String {
    let mut t = String::new();
    writeln!(t, "{:>4}  {:<32} {:>4} {:>10} {:>12} {:>6}", "#", "layer", "sch", "total ms", "max rel err", "ok").unwrap();
    for e in &r.layers {
        let err = e.max_rel_error.map_or("-".to_string(), |v| format!("{v:.2e}"));
        let ok = e.passed.map_or("-", |p| if p { "yes" } else { "NO" });
        writeln!(t, "{:>4}  {:<32} {:>4} {:>10} {:>12} {:>6}", e.index, e.label, e.schedule, ms(e.stats.total_s), err, ok).unwrap();
    }
    for e in &r.errors {
        writeln!(t, "{:>4}  {:<32} error: {}", e.index, e.label, e.error).unwrap();
    }
    t
}

pub fn bench(r: &BenchReport) -> String {
    let mut t = String::new();
    writeln!(
        t,
        "{:>4}  {:<32} {:>4} {:>10} {:>8} {:>8} {:>8} {:>10} {:>8} {:>8} {:>8} {:>6} {:>7}",
        "#", "layer", "sch", "sconv ms", "pack", "mK", "other", "base ms", "pack", "mK", "other", "stores", "speedup"
    )
    .unwrap();
    for e in &r.layers {
        let (s, b) = (&e.sconv, &e.baseline);
        writeln!(
            t,
            "{:>4}  {:<32} {:>4} {:>10} {:>8} {:>8} {:>8} {:>10} {:>8} {:>8} {:>8} {:>6.3} {:>7.2}",
            e.index,
            e.label,
            e.schedule,
            ms(s.total.mean_s),
            ms(s.pack.mean_s),
            ms(s.microkernel.mean_s),
            ms(s.other.mean_s),
            ms(b.total.mean_s),
            ms(b.pack.mean_s),
            ms(b.microkernel.mean_s),
            ms(b.other.mean_s),
            e.pack_store_ratio,
            e.speedup
        )
        .unwrap();
    }
    let a = &r.aggregate;
    writeln!(
        t,
        "total: sconv {} ms, baseline {} ms, speedup {:.2}, pack stores {:.3}",
        ms(a.sconv_total_s),
        ms(a.baseline_total_s),
        a.speedup,
        a.pack_store_ratio
    )
    .unwrap();
    t
}

pub fn simulate(r: &SimReportFile) -> String {
    let mut t = String::new();
    writeln!(
        t,
        "{:>4}  {:<32} {:>4} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>5}",
        "#", "layer", "sch", "L2 model", "L2 sim", "L3 model", "L3 sim", "cold model", "cold sim", "rel model", "rel sim", "ok"
    )
    .unwrap();
    for e in &r.layers {
        let (m, s) = (&e.sim.model, &e.sim);
        writeln!(
            t,
            "{:>4}  {:<32} {:>4} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>5}",
            e.index,
            e.label,
            s.schedule,
            m.n_l2,
            s.sim_l2,
            m.n_l3,
            s.sim_l3,
            m.n_dram1,
            s.sim_dram_cold,
            m.n_dram2,
            s.sim_dram_reload,
            if e.cold_misses_exact && e.zero_reload_identity { "yes" } else { "NO" }
        )
        .unwrap();
    }
    for e in &r.errors {
        writeln!(t, "{:>4}  {:<32} error: {}", e.index, e.label, e.error).unwrap();
    }
    t
}
