//! Differential fuzzing: every generated case runs in the interpreter and
//! under each configuration of a matrix; any observable difference is a
//! divergence.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use spc_core::compiler::{compile_function, CompilerConfig, Fault, Tagging};
use spc_core::engine::{AuditSnapshot, Engine, EngineConfig, ExecMode, OnScanError, Outcome, Safepoint, TierPolicy};
use spc_core::runtime::{frame_words, jit_frame_words, RootSet};
use spc_core::wasm::builder::Op;
use spc_core::wasm::WasmModule;

use crate::gen::{generate, Case, GenOptions};

/// Interpreter fuel per case; cases that need more are skipped.
pub const ORACLE_FUEL: u64 = 200_000;

/// Tier decisions drawn from a seeded generator, ignoring hotness.
pub struct RandomPolicy {
    rng: ChaCha8Rng,
    p: f64,
}

impl RandomPolicy {
    pub fn new(seed: u64, p: f64) -> Self {
        RandomPolicy { rng: ChaCha8Rng::seed_from_u64(seed), p }
    }
}

impl TierPolicy for RandomPolicy {
    fn tier_up(&mut self, _: u32, _: Safepoint, _: bool) -> bool {
        self.rng.gen_bool(self.p)
    }

    fn tier_down(&mut self, _: u32, _: Safepoint) -> bool {
        self.rng.gen_bool(self.p)
    }
}

/// One column of the matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub mode: ExecMode,
    pub compiler: CompilerConfig,
    /// Switch tiers at random safepoints (with [`ExecMode::Tiered`]).
    pub random_tiering: bool,
}

impl Variant {
    pub fn jit(compiler: CompilerConfig) -> Self {
        Variant { mode: ExecMode::Jit, compiler, random_tiering: false }
    }

    pub fn name(&self) -> String {
        match (self.mode, self.random_tiering) {
            (ExecMode::Jit, _) => self.compiler.name(),
            (_, true) => format!("tiered-random-{}", self.compiler.name()),
            (m, false) => format!("{}-{}", m.name(), self.compiler.name()),
        }
    }
}

/// Tagging modes of the full matrix.
pub const MATRIX_TAGGING: [Tagging; 4] = [Tagging::None, Tagging::Eager, Tagging::OnDemand, Tagging::Lazy];

/// Every single-ablation configuration under every matrix tagging mode.
pub fn full_matrix() -> Vec<Variant> {
    let mut v = Vec::new();
    for a in CompilerConfig::ABLATIONS {
        for t in MATRIX_TAGGING {
            v.push(Variant::jit(CompilerConfig::parse(a).expect("ablation").with_tagging(t)));
        }
    }
    v
}

/// Random tier transitions over allopt.
pub fn tiering_matrix() -> Vec<Variant> {
    vec![Variant { mode: ExecMode::Tiered, compiler: CompilerConfig::allopt(), random_tiering: true }]
}

/// `matrix` with a deliberate miscompilation switched on.
pub fn with_fault(matrix: &[Variant], fault: Fault) -> Vec<Variant> {
    matrix.iter().map(|v| Variant { compiler: CompilerConfig { fault: Some(fault), ..v.compiler }, ..*v }).collect()
}

/// Everything a run exposes.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub outcome: Outcome,
    pub memory: Vec<u8>,
    pub globals: Vec<u64>,
    pub printed: Vec<i64>,
    pub root_sets: Vec<RootSet>,
    pub audits: Vec<AuditSnapshot>,
    pub audit_failures: Vec<String>,
}

fn observe(m: &WasmModule, cfg: EngineConfig, policy: Option<RandomPolicy>, fuel: u64) -> Observation {
    let mut e = Engine::new(m, cfg).expect("generated imports resolve");
    if let Some(p) = policy {
        e.set_policy(Box::new(p));
    }
    e.set_fuel(Some(fuel));
    let main = m.entry_export().expect("main");
    let outcome = e.invoke(main, &[]).expect("main takes no arguments");
    Observation {
        outcome,
        memory: std::mem::take(&mut e.mach.memory.bytes),
        globals: e.mach.globals.clone(),
        printed: std::mem::take(&mut e.printed),
        root_sets: std::mem::take(&mut e.root_sets),
        audits: std::mem::take(&mut e.audits),
        audit_failures: std::mem::take(&mut e.audit_failures),
    }
}

/// Runs `case` under the interpreter, or `None` if it does not finish
/// within [`ORACLE_FUEL`].
pub fn oracle(m: &WasmModule) -> Option<Observation> {
    let cfg = EngineConfig { mode: ExecMode::Interp, audit: true, ..Default::default() };
    let o = observe(m, cfg, None, ORACLE_FUEL);
    (o.outcome != Outcome::Paused).then_some(o)
}

/// The first difference between the oracle's observation and `v`'s.
pub fn compare(m: &WasmModule, want: &Observation, v: &Variant, seed: u64) -> Option<String> {
    let cfg = EngineConfig {
        mode: v.mode,
        compiler: v.compiler,
        audit: true,
        on_scan_error: if v.compiler.tagging == Tagging::None { OnScanError::Record } else { OnScanError::Trap },
        ..Default::default()
    };
    let policy = v.random_tiering.then(|| RandomPolicy::new(seed, 0.5));
    // compiled code may cost more units than bytecodes, but not without bound
    let got = observe(m, cfg, policy, ORACLE_FUEL * 64);
    if v.mode == ExecMode::Jit {
        for i in 0..m.functions.len() {
            let f = m.imports.len() as u32 + i as u32;
            let cf = compile_function(m, f, &v.compiler);
            let (a, b) = (frame_words(&m.functions[i]), jit_frame_words(&cf));
            if a != b {
                return Some(format!("function {f}: frame words {a} (interpreter) vs {b} (compiled)"));
            }
        }
    }
    if got.outcome != want.outcome {
        return Some(format!("outcome {:?} vs {:?}", want.outcome, got.outcome));
    }
    if got.globals != want.globals {
        return Some(format!("globals {:?} vs {:?}", want.globals, got.globals));
    }
    if got.memory != want.memory {
        let at = got.memory.iter().zip(&want.memory).position(|(a, b)| a != b).unwrap_or(want.memory.len().min(got.memory.len()));
        return Some(format!("memory differs at byte {at} (sizes {} and {})", want.memory.len(), got.memory.len()));
    }
    if got.printed != want.printed {
        return Some(format!("printed {:?} vs {:?}", want.printed, got.printed));
    }
    if v.compiler.tagging != Tagging::None && got.root_sets != want.root_sets {
        return Some(format!("root sets {:?} vs {:?}", want.root_sets, got.root_sets));
    }
    if let Some(f) = got.audit_failures.first() {
        return Some(format!("tag contract: {f}"));
    }
    if got.audits != want.audits {
        let i = got.audits.iter().zip(&want.audits).position(|(a, b)| a != b).unwrap_or(want.audits.len().min(got.audits.len()));
        return Some(format!("frame snapshot {i}: {:?} vs {:?}", want.audits.get(i), got.audits.get(i)));
    }
    None
}

#[derive(Clone, Debug)]
pub struct Divergence {
    pub index: u64,
    pub variant: String,
    pub detail: String,
    pub case: Case,
    /// The case after shrinking and how it diverges, when requested.
    pub reduced: Option<(Case, String)>,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "case {} under {}: {}", self.index, self.variant, self.detail)?;
        let c = match &self.reduced {
            Some((c, detail)) => {
                writeln!(f, "reduced: {detail}")?;
                c
            }
            None => &self.case,
        };
        for (i, func) in c.funcs.iter().enumerate() {
            writeln!(f, "func {} {:?} -> {:?} locals {:?}", i + 4, func.params, func.result, func.locals)?;
            for o in &func.ops {
                writeln!(f, "  {o:?}")?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct FuzzReport {
    pub cases: u64,
    /// Cases the interpreter could not finish within its fuel.
    pub skipped: u64,
    /// Cases whose interpreter run ended in a trap.
    pub trapped: u64,
    pub runs: u64,
    /// Cases that create refs and call `host.gc_scan`.
    pub ref_scan_cases: u64,
    /// Root sets compared against the interpreter's.
    pub root_sets_checked: u64,
    pub divergences: Vec<Divergence>,
}

struct CaseResult {
    skipped: bool,
    trapped: bool,
    runs: u64,
    ref_scan: bool,
    root_sets: u64,
    divergence: Option<(String, String)>,
}

fn check_case(case: &Case, matrix: &[Variant], seed: u64) -> CaseResult {
    let m = WasmModule::load(&case.build()).expect("generated module validates");
    let mut r = CaseResult { skipped: false, trapped: false, runs: 0, ref_scan: case.scans_refs(), root_sets: 0, divergence: None };
    let Some(want) = oracle(&m) else {
        r.skipped = true;
        return r;
    };
    r.trapped = matches!(want.outcome, Outcome::Trapped { .. });
    for v in matrix {
        r.runs += 1;
        if v.compiler.tagging != Tagging::None {
            r.root_sets += want.root_sets.len() as u64;
        }
        if let Some(d) = compare(&m, &want, v, seed) {
            r.divergence = Some((v.name(), d));
            break;
        }
    }
    r
}

/// How `case` diverges under `v`, if it still validates and does.
fn divergence(case: &Case, v: &Variant, seed: u64) -> Option<String> {
    let m = WasmModule::load(&case.build()).ok()?;
    compare(&m, &oracle(&m)?, v, seed)
}

fn still_diverges(case: &Case, v: &Variant, seed: u64) -> bool {
    divergence(case, v, seed).is_some()
}

/// End of the construct starting at `ops[i]`, inclusive.
fn construct_end(ops: &[Op], i: usize) -> Option<usize> {
    let mut depth = 0usize;
    for (j, o) in ops.iter().enumerate().skip(i) {
        match o {
            Op::Block(_) | Op::Loop(_) | Op::If(_) => depth += 1,
            Op::End => {
                // a bare `end` closes an enclosing construct; nothing to delete
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(j);
                }
            }
            _ => {}
        }
        if depth == 0 {
            return Some(j);
        }
    }
    None
}

/// Greedily deletes instructions and whole constructs while the divergence
/// persists.
pub fn shrink(case: &Case, v: &Variant, seed: u64) -> Case {
    let mut best = case.clone();
    let mut progress = true;
    while progress {
        progress = false;
        for f in 0..best.funcs.len() {
            let mut i = 0;
            while i < best.funcs[f].ops.len() {
                let ops = &best.funcs[f].ops;
                let mut spans = Vec::new();
                if let Some(e) = construct_end(ops, i) {
                    spans.push(e + 1 - i);
                }
                spans.extend([4, 3, 2, 1].into_iter().filter(|&n| i + n <= ops.len()));
                let mut removed = false;
                for n in spans {
                    let mut c = best.clone();
                    c.funcs[f].ops.drain(i..i + n);
                    if still_diverges(&c, v, seed) {
                        best = c;
                        removed = true;
                        progress = true;
                        break;
                    }
                }
                if !removed {
                    i += 1;
                }
            }
        }
        // drop helper functions main no longer needs
        for f in (0..best.funcs.len().saturating_sub(1)).rev() {
            let mut c = best.clone();
            c.funcs.remove(f);
            let idx = 4 + f as u32;
            for g in &mut c.funcs {
                for o in &mut g.ops {
                    if let Op::Call(k) = o {
                        if *k > idx {
                            *k -= 1;
                        }
                    }
                }
            }
            if still_diverges(&c, v, seed) {
                best = c;
                progress = true;
            }
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct FuzzOptions {
    pub seed: u64,
    pub count: u64,
    pub gen: GenOptions,
    pub shrink: bool,
    /// Stop scheduling new cases after the first divergence.
    pub stop_early: bool,
}

/// Runs cases `0..count` against `matrix` in parallel. Divergences are
/// reported in case order; the first is shrunk if requested.
pub fn fuzz_differential(opts: &FuzzOptions, matrix: &[Variant]) -> FuzzReport {
    assert!(opts.count >= 1, "at least one case");
    let found = std::sync::atomic::AtomicU64::new(u64::MAX);
    let results: Vec<(u64, Case, CaseResult)> = (0..opts.count)
        .into_par_iter()
        .filter_map(|i| {
            if opts.stop_early && i > found.load(std::sync::atomic::Ordering::Relaxed) {
                return None;
            }
            let case = generate(opts.seed, i, &opts.gen);
            let r = check_case(&case, matrix, opts.seed ^ i);
            if r.divergence.is_some() {
                found.fetch_min(i, std::sync::atomic::Ordering::Relaxed);
            }
            Some((i, case, r))
        })
        .collect();
    let mut report = FuzzReport::default();
    for (i, case, r) in results {
        report.cases += 1;
        report.skipped += r.skipped as u64;
        report.trapped += r.trapped as u64;
        report.runs += r.runs;
        report.ref_scan_cases += (r.ref_scan && !r.skipped) as u64;
        report.root_sets_checked += r.root_sets;
        if let Some((variant, detail)) = r.divergence {
            report.divergences.push(Divergence { index: i, variant, detail, case, reduced: None });
        }
    }
    if opts.shrink {
        if let Some(d) = report.divergences.first_mut() {
            let v = matrix.iter().find(|v| v.name() == d.variant).expect("variant in matrix");
            let seed = opts.seed ^ d.index;
            let c = shrink(&d.case, v, seed);
            let detail = divergence(&c, v, seed).expect("shrinking keeps the divergence");
            d.reduced = Some((c, detail));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_has_no_divergences() {
        let opts = FuzzOptions { seed: 11, count: 40, gen: GenOptions::default(), shrink: false, stop_early: false };
        let r = fuzz_differential(&opts, &full_matrix());
        assert!(r.divergences.is_empty(), "{}", r.divergences[0]);
        assert_eq!(r.cases, 40);
    }

    #[test]
    fn construct_end_matches_nesting() {
        let ops = [Op::Block(None), Op::Nop, Op::Loop(None), Op::End, Op::End, Op::Nop];
        assert_eq!(construct_end(&ops, 0), Some(4));
        assert_eq!(construct_end(&ops, 2), Some(3));
        assert_eq!(construct_end(&ops, 5), Some(5));
        assert_eq!(construct_end(&ops, 3), None);
    }
}
