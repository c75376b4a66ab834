//! m0 construction and the adjusted-speedup arithmetic.

use spc_core::compiler::CompilerConfig;
use spc_core::engine::Outcome;
use spc_core::wasm::builder::m_nop;
use spc_harness::fuzz::{fuzz_differential, full_matrix, FuzzOptions};
use spc_harness::gen::{generate, GenOptions};
use spc_harness::kernels;
use spc_harness::m0::make_m0;
use spc_harness::measure::{measure_sq, Module};
use spc_harness::runner::{run_bytes, RunConfig};

#[test]
fn m0_returns_at_once() {
    for k in kernels::all() {
        let r = run_bytes(&make_m0(&k.bytes).unwrap(), &RunConfig::interp(), &[], None).unwrap();
        assert_eq!(r.outcome, Outcome::Returned(Some(0)), "{}", k.name);
        assert!(r.metrics.cost_units < 10, "{}: {}", k.name, r.metrics.cost_units);
    }
}

#[test]
fn m0_of_nop_behaves_like_nop() {
    let m0 = make_m0(&m_nop()).unwrap();
    for cfg in [RunConfig::interp(), RunConfig::jit(CompilerConfig::allopt())] {
        assert_eq!(run_bytes(&m0, &cfg, &[], None).unwrap().outcome, Outcome::Returned(None));
    }
}

#[test]
fn speedups_over_interpreter() {
    let modules: Vec<Module> = kernels::all().into_iter().map(|k| Module { suite: "k".into(), name: k.name.into(), bytes: k.bytes }).collect();
    let configs = [RunConfig::interp(), RunConfig::jit(CompilerConfig::allopt())];
    let r = measure_sq(&configs, &modules, 1).unwrap();
    assert_eq!(r.rows.len(), configs.len() * modules.len());
    for row in &r.rows {
        let s = row.adjusted_speedup.clone().unwrap();
        match row.config.as_str() {
            "int" => assert_eq!(s, 1.0, "{}", row.module),
            _ => assert!(s > 1.0, "{}: {s}", row.module),
        }
    }
    for s in &r.samples {
        assert!(s.m0.metrics.cost_units < s.m.metrics.cost_units);
    }
    assert!(r.points.iter().all(|p| p.adjusted_speedup > 0.0));
}

#[test]
fn same_seed_same_corpus() {
    let opts = GenOptions::default();
    for i in 0..50 {
        assert_eq!(generate(9, i, &opts).build(), generate(9, i, &opts).build());
    }
    assert_ne!(generate(9, 0, &opts).build(), generate(10, 0, &opts).build());
    let run = || {
        let f = FuzzOptions { seed: 5, count: 30, gen: opts, shrink: false, stop_early: false };
        let r = fuzz_differential(&f, &full_matrix());
        (r.cases, r.trapped, r.skipped, r.ref_scan_cases, r.root_sets_checked)
    };
    assert_eq!(run(), run());
}
