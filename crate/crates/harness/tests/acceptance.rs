//! End-to-end acceptance checks. Each check prints one PASS or FAIL line;
//! the process exits nonzero if any check fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use spc_core::compiler::{compile_function, CompilerConfig, Tagging};
use spc_core::engine::{Engine, EngineConfig, ExecMode};
use spc_core::wasm::builder::{FuncBody, ModuleBuilder, Op};
use spc_core::wasm::opcodes as op;
use spc_core::wasm::{ValType, WasmModule};
use spc_core::MetricsRecord;

use spc_harness::bomb::nested_blocks;
use spc_harness::fuzz::{full_matrix, fuzz_differential, tiering_matrix, FuzzOptions, Variant};
use spc_harness::gen::GenOptions;
use spc_harness::kernels::{self, arith, Kernel};
use spc_harness::measure::{measure_sq, total_ns, Module};
use spc_harness::probe::{loop_body_pcs, probe_suffix};
use spc_harness::runner::RunConfig;

type Check = Result<String, String>;

fn fuzz_seed() -> u64 {
    std::env::var("SPC_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(1)
}

fn load(bytes: &[u8]) -> WasmModule {
    WasmModule::load(bytes).expect("module validates")
}

/// Static metrics summed over every function of `m`.
fn static_metrics(m: &WasmModule, cfg: &CompilerConfig) -> MetricsRecord {
    let mut total = MetricsRecord::default();
    for i in 0..m.functions.len() {
        total.add_static(&compile_function(m, (m.imports.len() + i) as u32, cfg).metrics);
    }
    total
}

fn differential() -> Check {
    let start = Instant::now();
    let opts = FuzzOptions { seed: fuzz_seed(), count: 10_000, gen: GenOptions::default(), shrink: true, stop_early: true };
    let r = fuzz_differential(&opts, &full_matrix());
    let took = start.elapsed();
    if let Some(d) = r.divergences.first() {
        return Err(format!("{} divergences; first:\n{d}", r.divergences.len()));
    }
    if took > Duration::from_secs(600) {
        return Err(format!("took {took:.1?}"));
    }
    if r.skipped * 10 > r.cases {
        return Err(format!("{} of {} cases skipped", r.skipped, r.cases));
    }
    Ok(format!("{} cases, {} runs, {} trapped, {} skipped, {took:.1?}", r.cases, r.runs, r.trapped, r.skipped))
}

fn root_sets() -> Check {
    let opts = FuzzOptions { seed: fuzz_seed() ^ 0x5eed, count: 3000, gen: GenOptions::default(), shrink: true, stop_early: true };
    let mut matrix: Vec<_> = full_matrix().into_iter().filter(|v| v.compiler.tagging != Tagging::None).collect();
    // the split eager modes must agree as well
    for a in CompilerConfig::ABLATIONS {
        for t in [Tagging::EagerOps, Tagging::EagerLocals] {
            matrix.push(Variant::jit(CompilerConfig::parse(a).unwrap().with_tagging(t)));
        }
    }
    let r = fuzz_differential(&opts, &matrix);
    if let Some(d) = r.divergences.first() {
        return Err(format!("{d}"));
    }
    if r.ref_scan_cases == 0 || r.root_sets_checked == 0 {
        return Err("no case created refs and scanned".into());
    }
    Ok(format!("{} ref+scan cases, {} root sets compared over {} configs, 0 mismatches", r.ref_scan_cases, r.root_sets_checked, matrix.len()))
}

fn tagging() -> Check {
    let m = load(&arith(1_000_000));
    let entry = m.entry_export().unwrap();
    let mut runs = Vec::new();
    for t in [Tagging::None, Tagging::Eager, Tagging::OnDemand, Tagging::Lazy] {
        let cfg = EngineConfig { compiler: CompilerConfig::allopt().with_tagging(t), ..EngineConfig::with_mode(ExecMode::Jit) };
        let mut e = Engine::new(&m, cfg).map_err(|e| e.to_string())?;
        let out = e.invoke(entry, &[]).map_err(|e| e.to_string())?;
        runs.push((out, e.metrics()));
    }
    if runs.iter().any(|r| r.0 != runs[0].0) {
        return Err("results differ across tagging modes".into());
    }
    let [none, eager, ond, lazy] = [&runs[0].1, &runs[1].1, &runs[2].1, &runs[3].1];
    let line = format!(
        "tag stores none={} eager={} on-demand={} lazy={}; cost none={} eager={}",
        none.tag_stores_executed, eager.tag_stores_executed, ond.tag_stores_executed, lazy.tag_stores_executed, none.cost_units, eager.cost_units
    );
    let ok = none.tag_stores_executed == 0
        && ond.tag_stores_executed * 100 <= eager.tag_stores_executed
        && lazy.tag_stores_executed <= ond.tag_stores_executed
        && eager.cost_units * 10 >= none.cost_units * 13;
    if ok {
        Ok(line)
    } else {
        Err(line)
    }
}

fn ablations() -> Check {
    let mut notes = Vec::new();
    for Kernel { name, bytes } in kernels::all() {
        let m = load(&bytes);
        let all = static_metrics(&m, &CompilerConfig::allopt()).instrs_emitted;
        for a in &CompilerConfig::ABLATIONS[1..] {
            let n = static_metrics(&m, &CompilerConfig::parse(a).unwrap()).instrs_emitted;
            if all > n {
                return Err(format!("{name}: allopt {all} > {a} {n}"));
            }
            if name == "const_heavy" && *a == "nok" {
                if all * 10 > n * 7 {
                    return Err(format!("const_heavy: allopt {all} vs nok {n}, under 30% fewer"));
                }
                notes.push(format!("const_heavy allopt {all} vs nok {n} ({:.1}% fewer)", 100.0 * (n - all) as f64 / n as f64));
            }
        }
    }
    Ok(format!("allopt minimal on every kernel; {}", notes.join("")))
}

fn linearity() -> Check {
    let sizes = [1usize << 10, 10 << 10, 100 << 10, 1 << 20];
    let mut per_byte = Vec::new();
    for size in sizes {
        let m = load(&nested_blocks(size));
        let bytes = m.functions[0].body.len() as f64;
        let reps = if size >= 100 << 10 { 5 } else { 50 };
        let best = (0..reps)
            .map(|_| {
                let t = Instant::now();
                let cf = compile_function(&m, 0, &CompilerConfig::allopt());
                std::hint::black_box(&cf);
                t.elapsed().as_nanos() as f64
            })
            .fold(f64::INFINITY, f64::min);
        per_byte.push(best / bytes);
    }
    let line = per_byte.iter().zip(sizes).map(|(x, s)| format!("{}K {x:.1}", s >> 10)).collect::<Vec<_>>().join(", ");
    let base = per_byte[0];
    if per_byte.iter().all(|&x| x < base * 5.0 && x * 5.0 > base) {
        Ok(format!("ns/byte {line}"))
    } else {
        Err(format!("ns/byte {line}"))
    }
}

fn tiering() -> Check {
    // frame word equality is part of every full-matrix comparison; recheck here
    let opts = FuzzOptions { seed: fuzz_seed() ^ 0x71e5, count: 1000, gen: GenOptions::default(), shrink: true, stop_early: true };
    let r = fuzz_differential(&opts, &full_matrix()[..1]);
    if let Some(d) = r.divergences.first() {
        return Err(format!("frame words: {d}"));
    }
    let r = fuzz_differential(&opts, &tiering_matrix());
    if let Some(d) = r.divergences.first() {
        return Err(format!("random schedule: {d}"));
    }
    let schedules = r.cases - r.skipped;

    let mut probes = 0;
    for Kernel { name, bytes } in kernels::all() {
        let m = load(&bytes);
        let f = m.entry_export().unwrap();
        let mut e = Engine::new(&m, EngineConfig::with_mode(ExecMode::Jit)).map_err(|e| e.to_string())?;
        e.invoke(f, &[]).map_err(|e| e.to_string())?;
        let total = e.metrics().cost_units;
        let mut mid_loop = false;
        for pc in loop_body_pcs(&m, f) {
            for pause in [total / 10, total / 2, total * 9 / 10] {
                let c = probe_suffix(&m, f, pc, pause).map_err(|e| format!("{name} pc {pc}: {e}"))?;
                mid_loop |= c.late > 0 && c.late < c.full;
                probes += 1;
            }
        }
        if !mid_loop {
            return Err(format!("{name}: no probe was inserted while its loop was running"));
        }
    }
    Ok(format!("{schedules} random schedules match, {probes} mid-run probe suffixes match"))
}

fn golden() -> Check {
    let mut b = ModuleBuilder::new();
    let t = b.add_type(&[ValType::I32, ValType::I32], Some(ValType::I32));
    b.add_function(
        t,
        &[],
        FuncBody::from_ops(&[Op::LocalGet(0), Op::LocalGet(1), Op::Plain(op::I32_ADD), Op::I32Const(5), Op::Plain(op::I32_ADD)]),
    );
    let m = load(&b.build().unwrap());
    let cf = compile_function(&m, 0, &CompilerConfig::allopt());
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/add_const.allopt.dis");
    let want = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if cf.disassemble() != want {
        return Err(format!("disassembly changed:\n{}", cf.disassemble()));
    }
    let redundant = cf.program.instrs.iter().filter(|i| i.is_move()).count() as u64 - 1;
    if cf.metrics.spills_emitted != 0 || redundant != 0 {
        return Err(format!("{} spills, {redundant} redundant moves", cf.metrics.spills_emitted));
    }
    Ok(format!("{} instructions, 0 spills, 0 redundant moves", cf.program.instrs.len()))
}

fn sq() -> Check {
    let modules: Vec<Module> = kernels::all().into_iter().map(|k| Module { suite: "kernels".into(), name: k.name.into(), bytes: k.bytes }).collect();
    let mut configs = vec![RunConfig::interp()];
    configs.extend(CompilerConfig::ABLATIONS.iter().map(|a| RunConfig::jit(CompilerConfig::parse(a).unwrap())));
    let reps = 5;
    let r = measure_sq(&configs, &modules, reps).map_err(|e| e.to_string())?;
    for c in &configs {
        let name = c.name();
        for (i, m) in modules.iter().enumerate() {
            let mut d: Vec<i64> = r.samples.iter().filter(|s| s.config == name && s.module == i).map(|s| total_ns(&s.m0) as i64 - total_ns(&s.nop) as i64).collect();
            d.sort_unstable();
            if d[d.len() / 2] <= 0 {
                return Err(format!("{name}/{}: median T(m0) - T(M_nop) = {} ns", m.name, d[d.len() / 2]));
            }
        }
    }
    for row in &r.rows {
        let s = row.adjusted_speedup.clone().map_err(|e| format!("{}/{}: {e}", row.config, row.module))?;
        if row.config == "int" && s != 1.0 {
            return Err(format!("interpreter over itself on {}: {s}", row.module));
        }
        if row.config == "allopt" && s <= 1.0 {
            return Err(format!("allopt on {}: {s}", row.module));
        }
    }
    let pts = r.points.iter().map(|p| format!("{} {:.2}x", p.config, p.adjusted_speedup)).collect::<Vec<_>>().join(", ");
    Ok(format!("setup bound positive everywhere; {pts}"))
}

fn main() {
    // `cargo test -- <filter>` style arguments are accepted and ignored
    let checks: [(&str, fn() -> Check); 8] = [
        ("differential equivalence", differential),
        ("root-set oracle", root_sets),
        ("tagging directionality", tagging),
        ("ablation directionality", ablations),
        ("single pass linearity", linearity),
        ("frames and tiering", tiering),
        ("golden codegen", golden),
        ("setup/execution split", sq),
    ];
    let mut failed = 0;
    for (name, f) in checks {
        let t = Instant::now();
        match f() {
            Ok(s) => println!("PASS {name}: {s} [{:.1?}]", t.elapsed()),
            Err(s) => {
                failed += 1;
                println!("FAIL {name}: {s} [{:.1?}]", t.elapsed());
            }
        }
    }
    println!("{} of {} acceptance checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
