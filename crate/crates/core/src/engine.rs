//! Runs a module on either tier, or on both with tiering, over one value stack.
//!
//! The engine owns the activation stack and switches between the
//! interpreter and the emulator as frames are pushed, popped or converted.
//! Calls never recurse on the host stack: each tier returns an [`Event`]
//! at calls and returns, and the engine loop acts on it.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::compiler::{compile_function, CompiledFunction, CompilerConfig};
use crate::emulator;
use crate::interp::{self, Event, InterpEnv};
use crate::metrics::MetricsRecord;
use crate::runtime::{hotness_tick, scan_roots, tier_down, tier_up, Frame, Machine, Memory, RootSet, ScanError, DEFAULT_HOT_THRESHOLD};
use crate::values::TrapKind;
use crate::visa::Reg;
use crate::wasm::builder::read_op;
use crate::wasm::reader::Reader;
use crate::wasm::{FuncType, ValType, WasmModule};

/// Default limit on simultaneously live activations.
pub const MAX_FRAMES: u32 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExecMode {
    /// Interpreter only.
    Interp,
    /// Compiled code only (probed functions excepted).
    Jit,
    /// Start in the interpreter, switch hot frames to compiled code.
    Tiered,
}

impl ExecMode {
    pub fn name(self) -> &'static str {
        match self {
            ExecMode::Interp => "int",
            ExecMode::Jit => "jit",
            ExecMode::Tiered => "tiered",
        }
    }

    pub fn parse(s: &str) -> Option<ExecMode> {
        Some(match s {
            "int" | "interp" => ExecMode::Interp,
            "jit" => ExecMode::Jit,
            "tiered" => ExecMode::Tiered,
            _ => return None,
        })
    }
}

/// What `host.gc_scan` does when the stack cannot be scanned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OnScanError {
    /// Trap with [`TrapKind::ScanError`].
    Trap,
    /// Record the error and continue.
    Record,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EngineConfig {
    pub mode: ExecMode,
    pub compiler: CompilerConfig,
    /// Entries plus loop iterations before a frame tiers up.
    pub hot_threshold: u32,
    /// Record frame snapshots at calls and traps and check tag contracts.
    pub audit: bool,
    pub on_scan_error: OnScanError,
    /// A reference that `host.gc_scan` clears from every slot holding it.
    pub collect_ref: Option<u64>,
    pub max_frames: u32,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            mode: ExecMode::Jit,
            compiler: CompilerConfig::allopt(),
            hot_threshold: DEFAULT_HOT_THRESHOLD,
            audit: false,
            on_scan_error: OnScanError::Trap,
            collect_ref: None,
            max_frames: MAX_FRAMES,
        }
    }
}

impl EngineConfig {
    pub fn with_mode(mode: ExecMode) -> Self {
        EngineConfig { mode, ..Default::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Outcome {
    Returned(Option<u64>),
    /// `pc` is the bytecode offset (from the body start) of the trapping
    /// instruction, whichever tier raised it.
    Trapped { kind: TrapKind, func: u32, pc: u32 },
    /// Fuel ran out; [`Engine::resume`] continues.
    Paused,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EngineError {
    UnknownImport(String),
    ImportSignature(String),
    DataSegment(u32),
    NotAFunction(u32),
    Arguments { expected: usize, got: usize },
    NotPaused,
    InvalidLocation { func: u32, pc: u32 },
}

impl fmt::Display for EngineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EngineError::UnknownImport(n) => write!(f, "unknown import {n}"),
            EngineError::ImportSignature(n) => write!(f, "import {n} has the wrong signature"),
            EngineError::DataSegment(i) => write!(f, "data segment {i} does not fit in memory"),
            EngineError::NotAFunction(i) => write!(f, "function {i} is not a defined function"),
            EngineError::Arguments { expected, got } => write!(f, "expected {expected} arguments, got {got}"),
            EngineError::NotPaused => f.write_str("nothing to resume"),
            EngineError::InvalidLocation { func, pc } => write!(f, "pc {pc} of function {func} is not an instruction boundary"),
        }
    }
}

impl core::error::Error for EngineError {}

/// Where a frame may change tiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Safepoint {
    Entry,
    LoopHeader,
    CallReturn,
}

/// Decides tier transitions in [`ExecMode::Tiered`].
pub trait TierPolicy {
    /// Whether an interpreter frame switches to compiled code. `hot` reports
    /// whether the frame crossed the hotness threshold.
    fn tier_up(&mut self, func: u32, at: Safepoint, hot: bool) -> bool {
        let _ = (func, at);
        hot
    }

    /// Whether a compiled frame switches back to the interpreter.
    fn tier_down(&mut self, func: u32, at: Safepoint) -> bool {
        let _ = (func, at);
        false
    }
}

/// Tier up when hot, never tier down.
pub struct HotnessPolicy;

impl TierPolicy for HotnessPolicy {}

/// Read-only view of the frame a probe fires in.
pub struct FrameView<'a> {
    pub func: u32,
    pub pc: u32,
    pub locals: &'a [u64],
    pub operands: &'a [u64],
    pub tags: &'a [u8],
}

pub type ProbeFn<'m> = Box<dyn FnMut(&FrameView<'_>) + 'm>;
/// Receives `(func, pc, opcode, stack height)` before each interpreted instruction.
pub type TraceFn<'m> = Box<dyn FnMut(u32, u32, u8, u32) + 'm>;

/// A frame's slots at a call or trap, for comparing runs.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AuditSnapshot {
    pub depth: u32,
    pub func: u32,
    pub pc: u32,
    /// Locals and operands at a call (arguments included); locals at a trap.
    pub values: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Host {
    GcScan,
    MakeRef,
    RefId,
    Print,
}

impl Host {
    fn resolve(name: &str, ty: &FuncType) -> Result<Host, EngineError> {
        use ValType::*;
        let (h, params, result): (Host, &[ValType], Option<ValType>) = match name {
            "gc_scan" => (Host::GcScan, &[], None),
            "make_ref" => (Host::MakeRef, &[I32], Some(Ref)),
            "ref_id" => (Host::RefId, &[Ref], Some(I32)),
            "print" => (Host::Print, &[I64], None),
            _ => return Err(EngineError::UnknownImport(name.into())),
        };
        if ty.params != params || ty.result != result {
            return Err(EngineError::ImportSignature(name.into()));
        }
        Ok(h)
    }
}

pub struct Engine<'m> {
    module: &'m WasmModule,
    pub config: EngineConfig,
    compiled: Vec<Option<CompiledFunction>>,
    pub mach: Machine,
    hosts: Vec<Host>,
    hotness: Vec<u32>,
    probes: Vec<(u32, u32, ProbeFn<'m>)>,
    probe_pcs: Vec<Vec<u32>>,
    policy: Box<dyn TierPolicy + 'm>,
    trace: Option<TraceFn<'m>>,
    fuel: u64,
    running: bool,
    /// Payloads of references created by `host.make_ref`; reference `n` is `refs[n - 1]`.
    pub refs: Vec<i32>,
    pub printed: Vec<i64>,
    pub root_sets: Vec<RootSet>,
    pub scan_errors: Vec<ScanError>,
    pub audits: Vec<AuditSnapshot>,
    pub audit_failures: Vec<String>,
    pub tier_ups: u64,
    pub tier_downs: u64,
}

fn ret_reg(t: ValType) -> usize {
    if t.is_float() {
        Reg::X0.0 as usize
    } else {
        Reg::R0.0 as usize
    }
}

impl<'m> Engine<'m> {
    /// Instantiates `module`: resolves host imports, builds memory and globals.
    pub fn new(module: &'m WasmModule, config: EngineConfig) -> Result<Engine<'m>, EngineError> {
        assert!(module.validated, "module must be validated");
        let hosts = module
            .imports
            .iter()
            .map(|i| Host::resolve(&i.name, &module.types[i.type_idx as usize]))
            .collect::<Result<Vec<_>, _>>()?;
        let mut memory = match module.memory {
            Some(mt) => Memory::new(mt.min, mt.max),
            None => Memory::default(),
        };
        for (i, d) in module.data.iter().enumerate() {
            let src = &module.bytes[d.range.clone()];
            let at = d.offset as usize;
            if at + src.len() > memory.bytes.len() {
                return Err(EngineError::DataSegment(i as u32));
            }
            memory.bytes[at..at + src.len()].copy_from_slice(src);
        }
        let n = module.functions.len();
        let mach = Machine { memory, globals: module.globals.iter().map(|g| g.init).collect(), ..Default::default() };
        Ok(Engine {
            module,
            config,
            compiled: (0..n).map(|_| None).collect(),
            mach,
            hosts,
            hotness: vec![0; n],
            probes: Vec::new(),
            probe_pcs: vec![Vec::new(); n],
            policy: Box::new(HotnessPolicy),
            trace: None,
            fuel: u64::MAX,
            running: false,
            refs: Vec::new(),
            printed: Vec::new(),
            root_sets: Vec::new(),
            scan_errors: Vec::new(),
            audits: Vec::new(),
            audit_failures: Vec::new(),
            tier_ups: 0,
            tier_downs: 0,
        })
    }

    pub fn module(&self) -> &'m WasmModule {
        self.module
    }

    pub fn set_policy(&mut self, p: Box<dyn TierPolicy + 'm>) {
        self.policy = p;
    }

    pub fn set_trace(&mut self, t: Option<TraceFn<'m>>) {
        self.trace = t;
    }

    /// Limits further execution to `fuel` units (`None` for no limit). The
    /// interpreter spends one unit per bytecode, compiled code its cost units.
    pub fn set_fuel(&mut self, fuel: Option<u64>) {
        self.fuel = fuel.unwrap_or(u64::MAX);
    }

    pub fn fuel(&self) -> Option<u64> {
        (self.fuel != u64::MAX).then_some(self.fuel)
    }

    fn defined_index(&self, func: u32) -> usize {
        (func - self.module.imports.len() as u32) as usize
    }

    /// Compiled code for defined function `func` (function-space index), if any.
    pub fn compiled(&self, func: u32) -> Option<&CompiledFunction> {
        self.compiled.get(self.defined_index(func))?.as_ref()
    }

    fn ensure_compiled(&mut self, di: usize) {
        if self.compiled[di].is_none() {
            let func = di as u32 + self.module.imports.len() as u32;
            self.compiled[di] = Some(compile_function(self.module, func, &self.config.compiler));
        }
    }

    /// Compiles every defined function not compiled yet.
    pub fn compile_all(&mut self) {
        for di in 0..self.compiled.len() {
            self.ensure_compiled(di);
        }
    }

    /// Static counters of the compiled code plus the dynamic counters so far.
    ///
    /// Retired instructions and cost units count interpreted bytecodes at one
    /// unit each; tag stores count only those executed by compiled code.
    pub fn metrics(&self) -> MetricsRecord {
        let mut m = MetricsRecord::default();
        for cf in self.compiled.iter().flatten() {
            m.add_static(&cf.metrics);
        }
        let c = &self.mach.counters;
        m.instrs_retired = c.instrs_retired + c.bytecodes;
        m.cost_units = c.cost_units + c.bytecodes;
        m.tag_stores_executed = c.tag_stores_executed;
        m
    }

    fn probed(&self, di: usize) -> bool {
        !self.probe_pcs[di].is_empty()
    }

    /// Calls `cb` before every future execution of the instruction at `pc`
    /// in `func`. Compiled frames of `func` move to the interpreter at their
    /// next safepoint and new activations of it start interpreted.
    pub fn insert_probe(&mut self, func: u32, pc: u32, cb: ProbeFn<'m>) -> Result<(), EngineError> {
        let f = self.module.defined(func).ok_or(EngineError::NotAFunction(func))?;
        let base = f.body.start;
        let mut r = Reader::at(&self.module.bytes[..f.body.end], base + f.code_offset as usize);
        let mut found = false;
        while !r.is_at_end() {
            let at = (r.pos() - base) as u32;
            if at >= pc {
                found = at == pc;
                break;
            }
            read_op(&mut r).expect("validated body");
        }
        if !found {
            return Err(EngineError::InvalidLocation { func, pc });
        }
        let di = self.defined_index(func);
        let pcs = &mut self.probe_pcs[di];
        if let Err(i) = pcs.binary_search(&pc) {
            pcs.insert(i, pc);
        }
        self.probes.push((func, pc, cb));
        for fr in &mut self.mach.frames {
            if fr.func() == func && fr.is_jit() {
                fr.request_tier_down(true);
            }
        }
        Ok(())
    }

    /// Runs `func` with raw slot values as arguments.
    pub fn invoke(&mut self, func: u32, args: &[u64]) -> Result<Outcome, EngineError> {
        let ty = self.module.func_type(func).ok_or(EngineError::NotAFunction(func))?;
        self.module.defined(func).ok_or(EngineError::NotAFunction(func))?;
        if ty.params.len() != args.len() {
            return Err(EngineError::Arguments { expected: ty.params.len(), got: args.len() });
        }
        self.mach.frames.clear();
        self.mach.stack.ensure(args.len());
        for (i, (&v, &t)) in args.iter().zip(&ty.params).enumerate() {
            self.mach.stack.write(i as u32, v, t);
        }
        self.running = true;
        self.push_frame(func, 0);
        Ok(self.run_loop())
    }

    pub fn resume(&mut self) -> Result<Outcome, EngineError> {
        if !self.running {
            return Err(EngineError::NotPaused);
        }
        Ok(self.run_loop())
    }

    fn push_frame(&mut self, func: u32, vfp: u32) {
        let di = self.defined_index(func);
        let f = self.module.defined(func).expect("defined function");
        self.mach.stack.ensure((vfp + f.frame_slots()) as usize + 1);
        let probed = self.probed(di);
        let jit = self.config.mode == ExecMode::Jit && !probed;
        let mut fr = Frame::new(func, vfp, jit);
        if jit {
            self.ensure_compiled(di);
            self.mach.frames.push(fr);
            return;
        }
        for (i, &t) in f.local_types.iter().enumerate() {
            let s = vfp + i as u32;
            if i as u32 >= f.num_params {
                self.mach.stack.write(s, 0, t);
            } else {
                self.mach.stack.tags[s as usize] = t.tag();
            }
        }
        fr.set_ip(f.code_offset);
        fr.set_hotness(self.hotness[di]);
        let hot = hotness_tick(&mut fr, self.config.hot_threshold);
        self.hotness[di] = fr.hotness();
        self.mach.frames.push(fr);
        self.mach.sp = vfp + f.num_locals();
        if self.config.mode == ExecMode::Tiered && !probed && self.policy.tier_up(func, Safepoint::Entry, hot) {
            self.try_tier_up(di);
        }
    }

    fn try_tier_up(&mut self, di: usize) {
        self.ensure_compiled(di);
        let f = &self.module.functions[di];
        let cf = self.compiled[di].as_ref().expect("compiled");
        if tier_up(&mut self.mach, f, cf).is_ok() {
            self.tier_ups += 1;
            self.mach.skip_header = true;
        }
    }

    fn try_tier_down(&mut self, di: usize) -> bool {
        let f = &self.module.functions[di];
        let cf = self.compiled[di].as_ref().expect("compiled");
        let ok = tier_down(&mut self.mach, f, cf).is_ok();
        self.tier_downs += ok as u64;
        ok
    }

    fn run_loop(&mut self) -> Outcome {
        loop {
            let fr = *self.mach.top();
            let di = self.defined_index(fr.func());
            let ev = if fr.is_jit() {
                let watch = self.config.mode == ExecMode::Tiered || fr.tier_down_requested();
                let cf = self.compiled[di].as_ref().expect("compiled frame");
                emulator::run(&mut self.mach, self.module, cf, watch, &mut self.fuel)
            } else {
                let mut env = InterpEnv {
                    watch_loops: self.config.mode == ExecMode::Tiered && !self.probed(di),
                    probes: &self.probe_pcs[di],
                    trace: self.trace.as_mut().map(|t| &mut **t as &mut dyn FnMut(u32, u32, u8, u32)),
                };
                interp::run(&mut self.mach, self.module, &mut env, &mut self.fuel)
            };
            match ev {
                Event::Call { func, args, pc } => {
                    let nparams = self.module.func_type(func).expect("callee").params.len() as u32;
                    if self.config.audit {
                        self.audit(args + nparams, Some((func, pc)));
                    }
                    if (func as usize) < self.hosts.len() {
                        match self.host(func, args) {
                            Ok(v) => self.resume_caller(v, func, args),
                            Err(kind) => return self.trap(kind, pc),
                        }
                    } else if self.mach.frames.len() as u32 >= self.config.max_frames {
                        return self.trap(TrapKind::StackOverflow, pc);
                    } else {
                        self.push_frame(func, args);
                    }
                }
                Event::Return(v) => {
                    let callee = self.mach.frames.pop().expect("returning frame");
                    if self.mach.frames.is_empty() {
                        self.running = false;
                        return Outcome::Returned(v);
                    }
                    self.resume_caller(v, callee.func(), callee.vfp());
                }
                Event::Trap { kind, pc } => return self.trap(kind, pc),
                Event::OutOfFuel => return Outcome::Paused,
                Event::LoopHeader => {
                    let func = fr.func();
                    if fr.is_jit() {
                        let down = fr.tier_down_requested() || (self.config.mode == ExecMode::Tiered && self.policy.tier_down(func, Safepoint::LoopHeader));
                        if !(down && self.try_tier_down(di)) {
                            self.mach.skip_header = true;
                        }
                    } else {
                        let t = self.config.hot_threshold;
                        let hot = hotness_tick(self.mach.top_mut(), t);
                        self.hotness[di] = self.mach.top().hotness();
                        if self.policy.tier_up(func, Safepoint::LoopHeader, hot) {
                            self.try_tier_up(di);
                        }
                    }
                }
                Event::Probe(pc) => {
                    self.fire_probes(fr, pc);
                    self.mach.skip_probe = true;
                }
            }
        }
    }

    fn fire_probes(&mut self, fr: Frame, pc: u32) {
        let f = self.module.defined(fr.func()).expect("defined");
        let vfp = fr.vfp() as usize;
        let nl = f.num_locals() as usize;
        let sp = self.mach.sp as usize;
        let view = FrameView {
            func: fr.func(),
            pc,
            locals: &self.mach.stack.values[vfp..vfp + nl],
            operands: &self.mach.stack.values[vfp + nl..sp],
            tags: &self.mach.stack.tags[vfp..sp],
        };
        for (func, at, cb) in &mut self.probes {
            if *func == fr.func() && *at == pc {
                cb(&view);
            }
        }
    }

    /// Delivers a callee's result to the frame now on top, which resumes
    /// after its call. `at` is the first slot the callee's arguments used.
    fn resume_caller(&mut self, v: Option<u64>, callee: u32, at: u32) {
        let ty = self.module.func_type(callee).expect("callee").result;
        let fr = *self.mach.top();
        let func = fr.func();
        let di = self.defined_index(func);
        if fr.is_jit() {
            let down = fr.tier_down_requested() || (self.config.mode == ExecMode::Tiered && self.policy.tier_down(func, Safepoint::CallReturn));
            if !(down && self.try_tier_down(di)) {
                if let (Some(v), Some(t)) = (v, ty) {
                    self.mach.regs[ret_reg(t)] = v;
                }
                return;
            }
        } else {
            self.mach.sp = at;
        }
        if let (Some(v), Some(t)) = (v, ty) {
            let sp = self.mach.sp;
            self.mach.stack.write(sp, v, t);
            self.mach.sp += 1;
        }
    }

    fn trap(&mut self, kind: TrapKind, pc: u32) -> Outcome {
        let fr = *self.mach.top();
        let di = self.defined_index(fr.func());
        let pc = if fr.is_jit() { self.compiled[di].as_ref().expect("compiled").wasm_pc(pc as usize) } else { pc };
        if self.config.audit {
            let nl = self.module.functions[di].num_locals();
            self.audit(fr.vfp() + nl, None);
            self.audits.last_mut().expect("snapshot").pc = pc;
        }
        self.mach.frames.clear();
        self.running = false;
        Outcome::Trapped { kind, func: fr.func(), pc }
    }

    /// Records the top frame's slots below `end`. For a call from compiled
    /// code, also checks that the tags the tagging mode promises are present.
    fn audit(&mut self, end: u32, call: Option<(u32, u32)>) {
        let fr = *self.mach.top();
        let di = self.defined_index(fr.func());
        let vfp = fr.vfp();
        let mut pc = call.map_or(0, |c| c.1);
        if let (true, Some((callee, call_pc))) = (fr.is_jit(), call) {
            let cf = self.compiled[di].as_ref().expect("compiled");
            pc = cf.wasm_pc(call_pc as usize);
            let f = &self.module.functions[di];
            let below = &cf.call_return_at_visa(call_pc + 1).expect("call return").types;
            let params = &self.module.func_type(callee).expect("callee").params;
            let tagging = self.config.compiler.tagging;
            for (i, t) in below.iter().chain(params).enumerate() {
                let local = (i as u32) < f.num_locals();
                let got = self.mach.stack.tags[vfp as usize + i];
                if tagging.observed(local) && got != t.tag() {
                    self.audit_failures.push(format!("func {} pc {}: slot {} tag {:#x}, expected {:#x}", fr.func(), pc, i, got, t.tag()));
                }
            }
        }
        self.audits.push(AuditSnapshot {
            depth: self.mach.frames.len() as u32 - 1,
            func: fr.func(),
            pc,
            values: self.mach.stack.values[vfp as usize..end as usize].to_vec(),
        });
    }

    fn host(&mut self, import: u32, args: u32) -> Result<Option<u64>, TrapKind> {
        let arg = self.mach.stack.values.get(args as usize).copied().unwrap_or(0);
        match self.hosts[import as usize] {
            Host::GcScan => {
                let h = args - self.mach.top().vfp();
                match scan_roots(self.module, &self.mach, h, self.config.compiler.tagging) {
                    Ok(rs) => {
                        if let Some(c) = self.config.collect_ref {
                            for r in rs.roots.iter().filter(|r| r.value == c) {
                                let s = self.mach.frames[r.frame as usize].vfp() + r.slot;
                                self.mach.stack.values[s as usize] = 0;
                            }
                        }
                        self.root_sets.push(rs);
                    }
                    Err(e) => {
                        self.scan_errors.push(e);
                        if self.config.on_scan_error == OnScanError::Trap {
                            return Err(TrapKind::ScanError);
                        }
                    }
                }
                Ok(None)
            }
            Host::MakeRef => {
                self.refs.push(arg as u32 as i32);
                Ok(Some(self.refs.len() as u64))
            }
            Host::RefId => Ok(Some(match arg {
                0 => u32::MAX as u64,
                r => self.refs[r as usize - 1] as u32 as u64,
            })),
            Host::Print => {
                self.printed.push(arg as i64);
                Ok(None)
            }
        }
    }
}
