use std::cell::RefCell;
use std::rc::Rc;

use spc_core::compiler::{compile_function, CompilerConfig, Tagging};
use spc_core::engine::{Engine, EngineConfig, EngineError, ExecMode, OnScanError, Outcome, Safepoint, TierPolicy};
use spc_core::runtime::{frame_words, jit_frame_words};
use spc_core::values::TrapKind;
use spc_core::wasm::builder::{m_nop, FuncBody, MemArg, ModuleBuilder, Op};
use spc_core::wasm::opcodes as op;
use spc_core::wasm::{ValType, WasmModule};

use ValType::*;

const MODES: [ExecMode; 3] = [ExecMode::Interp, ExecMode::Jit, ExecMode::Tiered];

fn single(params: &[ValType], result: Option<ValType>, locals: &[(u32, ValType)], ops: &[Op]) -> WasmModule {
    let mut b = ModuleBuilder::new();
    let t = b.add_type(params, result);
    b.add_function(t, locals, FuncBody::from_ops(ops));
    b.add_memory(1, Some(2));
    WasmModule::load(&b.build().unwrap()).unwrap()
}

fn run(m: &WasmModule, cfg: EngineConfig, func: u32, args: &[u64]) -> Outcome {
    let mut e = Engine::new(m, cfg).unwrap();
    e.invoke(func, args).unwrap()
}

fn run_all(m: &WasmModule, func: u32, args: &[u64]) -> Vec<Outcome> {
    MODES.iter().map(|&mode| run(m, EngineConfig::with_mode(mode), func, args)).collect()
}

/// `sum(n) = 0 + 1 + ... + (n-1)` with a counting loop.
fn sum_loop() -> WasmModule {
    single(
        &[I32],
        Some(I32),
        &[(2, I32)],
        &[
            Op::Block(None),
            Op::Loop(None),
            Op::LocalGet(1),
            Op::LocalGet(0),
            Op::Plain(op::I32_GE_S),
            Op::BrIf(1),
            Op::LocalGet(2),
            Op::LocalGet(1),
            Op::Plain(op::I32_ADD),
            Op::LocalSet(2),
            Op::LocalGet(1),
            Op::I32Const(1),
            Op::Plain(op::I32_ADD),
            Op::LocalSet(1),
            Op::Br(0),
            Op::End,
            Op::End,
            Op::LocalGet(2),
        ],
    )
}

// Body bytes: 01 02 7f (locals) | 02 40 | 03 40 | 20 01 ... ; the loop body
// starts right after `loop 0x40`, at offset 3 + 2 + 2 = 7.
const SUM_LOOP_BODY_PC: u32 = 7;

#[test]
fn division_by_zero_traps_at_the_same_pc_in_every_tier() {
    let m = single(&[I32, I32], Some(I32), &[], &[Op::LocalGet(0), Op::LocalGet(1), Op::Plain(op::I32_DIV_S)]);
    // 00 | 20 00 | 20 01 | 6d: the division sits at pc 5
    let want = Outcome::Trapped { kind: TrapKind::DivByZero, func: 0, pc: 5 };
    assert_eq!(run_all(&m, 0, &[1, 0]), vec![want; 3]);
    let want = Outcome::Trapped { kind: TrapKind::IntegerOverflow, func: 0, pc: 5 };
    assert_eq!(run_all(&m, 0, &[i32::MIN as u32 as u64, u32::MAX as u64]), vec![want; 3]);
    assert_eq!(run_all(&m, 0, &[7, 2]), vec![Outcome::Returned(Some(3)); 3]);
}

#[test]
fn m_nop_returns_nothing() {
    let m = WasmModule::load(&m_nop()).unwrap();
    assert_eq!(m.bytes.len(), 104);
    assert_eq!(run_all(&m, 0, &[]), vec![Outcome::Returned(None); 3]);
}

#[test]
fn memory_grow_past_maximum_returns_minus_one() {
    let m = single(&[I32], Some(I32), &[], &[Op::LocalGet(0), Op::MemoryGrow]);
    assert_eq!(run_all(&m, 0, &[1]), vec![Outcome::Returned(Some(1)); 3]);
    assert_eq!(run_all(&m, 0, &[2]), vec![Outcome::Returned(Some(u32::MAX as u64)); 3]);
}

#[test]
fn constant_function_retires_at_most_four_instructions() {
    let m = single(&[], Some(I32), &[], &[Op::I32Const(5)]);
    let mut e = Engine::new(&m, EngineConfig::with_mode(ExecMode::Jit)).unwrap();
    assert_eq!(e.invoke(0, &[]).unwrap(), Outcome::Returned(Some(5)));
    assert!(e.mach.counters.instrs_retired <= 4, "{}", e.mach.counters.instrs_retired);
}

#[test]
fn out_of_bounds_load_traps_in_every_tier() {
    let m = single(&[I32], Some(I32), &[], &[Op::LocalGet(0), Op::Load(op::I32_LOAD, MemArg { align: 2, offset: 4 })]);
    let want = Outcome::Trapped { kind: TrapKind::OutOfBounds, func: 0, pc: 3 };
    assert_eq!(run_all(&m, 0, &[65532]), vec![want; 3]);
    assert_eq!(run_all(&m, 0, &[65528]), vec![Outcome::Returned(Some(0)); 3]);
}

#[test]
fn loops_agree_across_tiers() {
    let m = sum_loop();
    for n in [0u64, 1, 5, 100] {
        let want = Outcome::Returned(Some(n * n.saturating_sub(1) / 2));
        assert_eq!(run_all(&m, 0, &[n]), vec![want; 3], "n = {n}");
    }
}

#[test]
fn unbounded_recursion_overflows_the_stack() {
    let m = single(&[I32], Some(I32), &[], &[Op::LocalGet(0), Op::Call(0)]);
    for o in run_all(&m, 0, &[1]) {
        assert!(matches!(o, Outcome::Trapped { kind: TrapKind::StackOverflow, func: 0, pc: 3 }), "{o:?}");
    }
}

#[test]
fn frames_have_the_same_size_in_both_tiers() {
    let m = sum_loop();
    for cfg in CompilerConfig::ABLATIONS {
        let cf = compile_function(&m, 0, &CompilerConfig::parse(cfg).unwrap());
        assert_eq!(frame_words(&m.functions[0]), jit_frame_words(&cf));
    }
}

#[test]
fn fuel_pauses_and_resumes() {
    let m = sum_loop();
    for mode in MODES {
        let mut e = Engine::new(&m, EngineConfig::with_mode(mode)).unwrap();
        e.set_fuel(Some(50));
        let mut out = e.invoke(0, &[40]).unwrap();
        let mut pauses = 0;
        while out == Outcome::Paused {
            pauses += 1;
            e.set_fuel(Some(50));
            out = e.resume().unwrap();
        }
        assert!(pauses > 0);
        assert_eq!(out, Outcome::Returned(Some(780)));
        assert_eq!(e.resume(), Err(EngineError::NotPaused));
    }
}

/// Imports `host.make_ref` (0) and `host.gc_scan` (1). The function takes an
/// i32, makes a ref from it into local 1, scans, and returns the ref's id.
fn ref_module() -> WasmModule {
    let mut b = ModuleBuilder::new();
    let mk = b.add_type(&[I32], Some(Ref));
    let scan = b.add_type(&[], None);
    let id = b.add_type(&[Ref], Some(I32));
    let main = b.add_type(&[I32], Some(I32));
    b.import_func("host", "make_ref", mk);
    b.import_func("host", "gc_scan", scan);
    b.import_func("host", "ref_id", id);
    b.add_function(
        main,
        &[(1, Ref)],
        FuncBody::from_ops(&[Op::LocalGet(0), Op::Call(0), Op::LocalSet(1), Op::Call(1), Op::LocalGet(1), Op::Call(2)]),
    );
    WasmModule::load(&b.build().unwrap()).unwrap()
}

fn scan_config(mode: ExecMode, tagging: Tagging) -> EngineConfig {
    let mut c = EngineConfig::with_mode(mode);
    c.compiler = c.compiler.with_tagging(tagging);
    c
}

#[test]
fn root_scan_finds_the_ref_local() {
    let m = ref_module();
    let mut oracle = Engine::new(&m, EngineConfig::with_mode(ExecMode::Interp)).unwrap();
    assert_eq!(oracle.invoke(3, &[42]).unwrap(), Outcome::Returned(Some(42)));
    let want: Vec<(u32, u32)> = oracle.root_sets[0].roots.iter().map(|r| (r.frame, r.slot)).collect();
    assert_eq!(want, vec![(0, 1)]);

    let mut executed = Vec::new();
    for t in [Tagging::Eager, Tagging::EagerOps, Tagging::EagerLocals, Tagging::OnDemand, Tagging::Lazy] {
        let mut e = Engine::new(&m, scan_config(ExecMode::Jit, t)).unwrap();
        assert_eq!(e.invoke(3, &[42]).unwrap(), Outcome::Returned(Some(42)), "{t:?}");
        assert_eq!(e.root_sets, oracle.root_sets, "{t:?}");
        executed.push(e.mach.counters.tag_stores_executed);
    }
    // lazy tagging stores no local tags: only the two call arguments are tagged
    assert_eq!(executed[4], 2);
    assert!(executed[4] < executed[3]);
}

#[test]
fn scanning_without_tags_is_an_error() {
    let m = ref_module();
    // 01 01 6f | 20 00 | 10 00 | 21 01 | 10 01: gc_scan is called at pc 9
    let mut e = Engine::new(&m, scan_config(ExecMode::Jit, Tagging::None)).unwrap();
    assert_eq!(e.invoke(3, &[1]).unwrap(), Outcome::Trapped { kind: TrapKind::ScanError, func: 3, pc: 9 });
    let mut c = scan_config(ExecMode::Jit, Tagging::None);
    c.on_scan_error = OnScanError::Record;
    let mut e = Engine::new(&m, c).unwrap();
    assert_eq!(e.invoke(3, &[1]).unwrap(), Outcome::Returned(Some(1)));
    assert_eq!(e.scan_errors.len(), 1);
}

#[test]
fn collected_refs_are_cleared_in_every_tier() {
    let m = ref_module();
    for mode in MODES {
        let mut c = EngineConfig::with_mode(mode);
        c.collect_ref = Some(1);
        let mut e = Engine::new(&m, c).unwrap();
        assert_eq!(e.invoke(3, &[9]).unwrap(), Outcome::Returned(Some(u32::MAX as u64)), "{mode:?}");
    }
}

#[test]
fn unknown_imports_are_rejected() {
    let mut b = ModuleBuilder::new();
    let t = b.add_type(&[], None);
    b.import_func("host", "launch", t);
    let m = WasmModule::load(&b.build().unwrap()).unwrap();
    assert!(matches!(Engine::new(&m, EngineConfig::default()), Err(EngineError::UnknownImport(_))));
}

#[test]
fn eager_tagging_stores_a_tag_per_push() {
    let mut ops = vec![Op::LocalGet(0)];
    for _ in 0..100 {
        ops.push(Op::LocalGet(0));
        ops.push(Op::Plain(op::I32_ADD));
    }
    let m = single(&[I32], Some(I32), &[], &ops);
    let count = |t| {
        let mut e = Engine::new(&m, scan_config(ExecMode::Jit, t)).unwrap();
        assert_eq!(e.invoke(0, &[3]).unwrap(), Outcome::Returned(Some(303)));
        e.mach.counters.tag_stores_executed
    };
    assert!(count(Tagging::Eager) >= 100);
    assert_eq!(count(Tagging::OnDemand), 0);
}

/// Tiers up everywhere it may and tiers down every `every`-th time it is asked.
struct Flip {
    n: u32,
    every: u32,
}

impl TierPolicy for Flip {
    fn tier_up(&mut self, _: u32, _: Safepoint, _: bool) -> bool {
        true
    }

    fn tier_down(&mut self, _: u32, _: Safepoint) -> bool {
        self.n += 1;
        self.n.is_multiple_of(self.every)
    }
}

#[test]
fn tier_transitions_preserve_results() {
    let m = sum_loop();
    let want = run(&m, EngineConfig::with_mode(ExecMode::Interp), 0, &[50]);
    for every in 1..5 {
        let mut e = Engine::new(&m, EngineConfig::with_mode(ExecMode::Tiered)).unwrap();
        e.set_policy(Box::new(Flip { n: 0, every }));
        assert_eq!(e.invoke(0, &[50]).unwrap(), want);
        assert!(e.tier_ups > 0 && e.tier_downs > 0, "every {every}");
    }
}

#[test]
fn hot_loops_tier_up_mid_run() {
    let m = sum_loop();
    let mut c = EngineConfig::with_mode(ExecMode::Tiered);
    c.hot_threshold = 3;
    let mut e = Engine::new(&m, c).unwrap();
    assert_eq!(e.invoke(0, &[20]).unwrap(), Outcome::Returned(Some(190)));
    assert_eq!(e.tier_ups, 1);
    // entered once, so tiering happened at the loop header
    assert!(e.mach.counters.bytecodes > 0 && e.mach.counters.instrs_retired > 0);

    c.hot_threshold = 1;
    let mut e = Engine::new(&m, c).unwrap();
    assert_eq!(e.invoke(0, &[20]).unwrap(), Outcome::Returned(Some(190)));
    assert_eq!(e.tier_ups, 1);
    assert_eq!(e.mach.counters.bytecodes, 0);
}

type Seen = Rc<RefCell<Vec<(u32, Vec<u64>, Vec<u64>)>>>;

fn recorder(seen: &Seen) -> Box<dyn FnMut(&spc_core::engine::FrameView<'_>)> {
    let seen = seen.clone();
    Box::new(move |v| seen.borrow_mut().push((v.pc, v.locals.to_vec(), v.operands.to_vec())))
}

#[test]
fn probes_fire_once_per_iteration() {
    let m = sum_loop();
    for mode in MODES {
        let seen: Seen = Default::default();
        let mut e = Engine::new(&m, EngineConfig::with_mode(mode)).unwrap();
        e.insert_probe(0, SUM_LOOP_BODY_PC, recorder(&seen)).unwrap();
        assert_eq!(e.invoke(0, &[5]).unwrap(), Outcome::Returned(Some(10)));
        // five iterations plus the final exit test
        assert_eq!(seen.borrow().len(), 6, "{mode:?}");
        assert_eq!(e.mach.counters.instrs_retired, 0);
    }
}

#[test]
fn probes_only_at_instruction_boundaries() {
    let m = single(&[], Some(I32), &[], &[Op::I32Const(1000)]);
    let mut e = Engine::new(&m, EngineConfig::default()).unwrap();
    // 00 | 41 e8 07 | 0b
    assert_eq!(e.insert_probe(0, 2, Box::new(|_| {})), Err(EngineError::InvalidLocation { func: 0, pc: 2 }));
    assert!(e.insert_probe(0, 1, Box::new(|_| {})).is_ok());
    assert!(e.insert_probe(0, 4, Box::new(|_| {})).is_ok());
    assert!(e.insert_probe(0, 5, Box::new(|_| {})).is_err());
}

#[test]
fn probe_inserted_into_a_running_compiled_frame() {
    let m = sum_loop();
    let full: Seen = Default::default();
    let mut e = Engine::new(&m, EngineConfig::with_mode(ExecMode::Interp)).unwrap();
    e.insert_probe(0, SUM_LOOP_BODY_PC, recorder(&full)).unwrap();
    assert_eq!(e.invoke(0, &[30]).unwrap(), Outcome::Returned(Some(435)));

    let late: Seen = Default::default();
    let mut e = Engine::new(&m, EngineConfig::with_mode(ExecMode::Jit)).unwrap();
    e.set_fuel(Some(100));
    assert_eq!(e.invoke(0, &[30]).unwrap(), Outcome::Paused);
    assert!(e.mach.top().is_jit());
    e.insert_probe(0, SUM_LOOP_BODY_PC, recorder(&late)).unwrap();
    e.set_fuel(None);
    assert_eq!(e.resume().unwrap(), Outcome::Returned(Some(435)));
    assert_eq!(e.tier_downs, 1);
    let (full, late) = (full.borrow(), late.borrow());
    assert!(!late.is_empty() && late.len() < full.len());
    assert_eq!(&full[full.len() - late.len()..], &late[..]);
}

#[test]
fn audits_match_between_tiers() {
    let mut b = ModuleBuilder::new();
    let t2 = b.add_type(&[I32, I32], Some(I32));
    let t1 = b.add_type(&[I32], Some(I32));
    let add = b.add_function(t2, &[], FuncBody::from_ops(&[Op::LocalGet(0), Op::LocalGet(1), Op::Plain(op::I32_ADD)]));
    b.add_function(
        t1,
        &[(1, I32)],
        FuncBody::from_ops(&[
            Op::I32Const(3),
            Op::LocalSet(1),
            Op::LocalGet(0),
            Op::I32Const(4),
            Op::Call(add),
            Op::LocalGet(1),
            Op::Call(add),
            Op::LocalGet(0),
            Op::Plain(op::I32_DIV_U),
        ]),
    );
    let m = WasmModule::load(&b.build().unwrap()).unwrap();
    let audits = |mode, tagging| {
        let mut c = scan_config(mode, tagging);
        c.audit = true;
        let mut e = Engine::new(&m, c).unwrap();
        let out = e.invoke(1, &[0]).unwrap();
        assert!(e.audit_failures.is_empty(), "{:?}", e.audit_failures);
        (out, e.audits)
    };
    let want = audits(ExecMode::Interp, Tagging::OnDemand);
    assert!(matches!(want.0, Outcome::Trapped { kind: TrapKind::DivByZero, func: 1, .. }));
    assert_eq!(want.1.len(), 3);
    for t in Tagging::ALL {
        assert_eq!(audits(ExecMode::Jit, t), want, "{t:?}");
    }
}

#[test]
fn deeply_nested_blocks_agree_across_tiers() {
    let depth = 4000;
    let mut ops: Vec<Op> = (0..depth).map(|_| Op::Block(None)).collect();
    for _ in 0..depth {
        ops.extend([Op::LocalGet(0), Op::I32Const(3), Op::Plain(op::I32_ADD), Op::LocalTee(0), Op::LocalGet(1), Op::Plain(op::I32_AND), Op::BrIf(0), Op::End]);
    }
    ops.push(Op::LocalGet(0));
    let m = single(&[I32, I32], Some(I32), &[], &ops);
    let results = run_all(&m, 0, &[1, 0]);
    assert!(results.iter().all(|r| *r == Outcome::Returned(Some(1 + 3 * depth as u64))), "{results:?}");
}
