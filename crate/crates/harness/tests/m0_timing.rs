//! Compile time of m0 against the original. Kept alone in its own test
//! binary so no other test competes for the CPU while it measures.

use spc_core::compiler::CompilerConfig;
use spc_harness::kernels;
use spc_harness::m0::make_m0;
use spc_harness::runner::{run_bytes, RunConfig};

/// Fastest compile of `a` and of `b`, measured alternately so that machine
/// noise hits both.
fn min_compile_ns(a: &[u8], b: &[u8], reps: usize) -> (u64, u64) {
    let cfg = RunConfig::jit(CompilerConfig::allopt());
    // m0 returns at once, so a cost limit only bounds the original
    let compile = |bytes| run_bytes(bytes, &cfg, &[], Some(1)).unwrap().metrics.compile_ns;
    (0..reps).fold((u64::MAX, u64::MAX), |(x, y), _| (x.min(compile(a)), y.min(compile(b))))
}

#[test]
fn m0_compiles_like_the_original() {
    for k in kernels::all() {
        let m0 = make_m0(&k.bytes).unwrap();
        let (a, b) = min_compile_ns(&k.bytes, &m0, 200);
        let ratio = b as f64 / a as f64;
        assert!((0.9..=1.1).contains(&ratio), "{}: compile {a} ns vs m0 {b} ns", k.name);
    }
}
