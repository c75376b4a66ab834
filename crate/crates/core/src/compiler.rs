//! The single-pass compiler.
//!
//! Each function body is read once, front to back. Every instruction updates
//! the abstract state and emits vISA code for whatever cannot be resolved at
//! compile time. There is no IR: control-flow joins are handled with state
//! snapshots on the abstract control stack, and code that reconciles a
//! branch's state with its target's is placed out of line at the end of the
//! function.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::abstract_state::{conform, meet, normalize, settle, store_const, AbstractState, AbstractValue, EagerTags, Emit, Spill, StateSnapshot};
use crate::metrics::MetricsRecord;
use crate::values::{self, Cond, Conv, FUnOp, FloatOp, IntOp, Numeric, Width};
use crate::visa::{CodeBuffer, Instr, Label, MemKind, Opnd, Reg, VisaProgram};
use crate::wasm::builder::{read_op, Op};
use crate::wasm::reader::Reader;
use crate::wasm::{mem_access, opcodes as op, ValType, WasmFunction, WasmModule};

/// When value tags are written to the frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tagging {
    /// Never; root scanning is unsupported.
    None,
    /// On every slot write.
    Eager,
    /// On every operand-stack write; locals on demand.
    EagerOps,
    /// On every local write; operands on demand.
    EagerLocals,
    /// Only at observation points, tracked per slot.
    OnDemand,
    /// Like on-demand, but local tags are never stored; the stack walker
    /// derives them from the function's declarations.
    Lazy,
}

impl Tagging {
    pub const ALL: [Tagging; 6] = [Tagging::None, Tagging::Eager, Tagging::EagerOps, Tagging::EagerLocals, Tagging::OnDemand, Tagging::Lazy];

    pub fn name(self) -> &'static str {
        match self {
            Tagging::None => "notags",
            Tagging::Eager => "eagertags",
            Tagging::EagerOps => "eagertags-o",
            Tagging::EagerLocals => "eagertags-l",
            Tagging::OnDemand => "on-demand",
            Tagging::Lazy => "lazytags",
        }
    }

    /// Accepts configuration names and the short CLI spellings.
    pub fn parse(s: &str) -> Option<Tagging> {
        Some(match s {
            "notags" | "none" => Tagging::None,
            "eagertags" | "eager" => Tagging::Eager,
            "eagertags-o" | "eager-ops" => Tagging::EagerOps,
            "eagertags-l" | "eager-locals" => Tagging::EagerLocals,
            "on-demand" | "ondemand" => Tagging::OnDemand,
            "lazytags" | "lazy" => Tagging::Lazy,
            _ => return None,
        })
    }

    pub fn eager(self) -> EagerTags {
        EagerTags {
            locals: matches!(self, Tagging::Eager | Tagging::EagerLocals),
            operands: matches!(self, Tagging::Eager | Tagging::EagerOps),
        }
    }

    /// Whether a slot's tag must be in the frame at observation points.
    pub fn observed(self, local: bool) -> bool {
        match self {
            Tagging::None => false,
            Tagging::Lazy => !local,
            _ => true,
        }
    }
}

/// Deliberate miscompilations for checking that the fuzzer notices them.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Fault {
    /// Two-way merges keep the first arrival's constants even when the
    /// second arrival disagrees.
    BrokenMerge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CompilerConfig {
    pub track_consts: bool,
    pub fold_consts: bool,
    pub isel_imm: bool,
    pub multi_reg: bool,
    pub tagging: Tagging,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for CompilerConfig {
    fn default() -> Self {
        CompilerConfig::allopt()
    }
}

impl CompilerConfig {
    /// The single-ablation configuration names, `allopt` first.
    pub const ABLATIONS: [&'static str; 5] = ["allopt", "nok", "nokfold", "noisel", "nomr"];

    pub const fn allopt() -> Self {
        CompilerConfig { track_consts: true, fold_consts: true, isel_imm: true, multi_reg: true, tagging: Tagging::OnDemand, fault: None }
    }

    /// No constant tracking, hence no folding or immediate selection.
    pub const fn nok() -> Self {
        CompilerConfig { track_consts: false, fold_consts: false, isel_imm: false, ..Self::allopt() }
    }

    pub const fn nokfold() -> Self {
        CompilerConfig { fold_consts: false, ..Self::allopt() }
    }

    pub const fn noisel() -> Self {
        CompilerConfig { isel_imm: false, ..Self::allopt() }
    }

    pub const fn nomr() -> Self {
        CompilerConfig { multi_reg: false, ..Self::allopt() }
    }

    pub const fn with_tagging(self, tagging: Tagging) -> Self {
        CompilerConfig { tagging, ..self }
    }

    /// Folding and immediate selection both need constant tracking.
    pub fn is_valid(&self) -> bool {
        self.track_consts || (!self.fold_consts && !self.isel_imm)
    }

    /// Canonical name, e.g. `allopt`, `nomr`, `lazytags` or `nokfold+eagertags`.
    pub fn name(&self) -> String {
        let mut parts: Vec<&str> = Vec::new();
        if !self.track_consts {
            parts.push("nok");
        } else {
            if !self.fold_consts {
                parts.push("nokfold");
            }
            if !self.isel_imm {
                parts.push("noisel");
            }
        }
        if !self.multi_reg {
            parts.push("nomr");
        }
        if self.tagging != Tagging::OnDemand || parts.is_empty() {
            if parts.is_empty() && self.tagging == Tagging::OnDemand {
                parts.push("allopt");
            } else {
                parts.push(self.tagging.name());
            }
        }
        parts.join("+")
    }

    /// Parses a `+`-separated list of ablation and tagging names.
    pub fn parse(name: &str) -> Option<CompilerConfig> {
        let mut c = CompilerConfig::allopt();
        for part in name.split('+') {
            match part {
                "allopt" => {}
                "nok" => {
                    c.track_consts = false;
                    c.fold_consts = false;
                    c.isel_imm = false;
                }
                "nokfold" => c.fold_consts = false,
                "noisel" => c.isel_imm = false,
                "nomr" => c.multi_reg = false,
                t => c.tagging = Tagging::parse(t)?,
            }
        }
        Some(c)
    }
}

impl fmt::Display for CompilerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// A loop header where a frame can switch tiers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoopHeader {
    /// First instruction of the loop body.
    pub wasm_pc: u32,
    pub visa_pc: u32,
    /// Types of all live slots (locals, then operands).
    pub types: Vec<ValType>,
}

/// The point just after a call, where a suspended caller resumes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CallReturn {
    pub visa_pc: u32,
    pub wasm_pc: u32,
    /// Types of the slots below the callee's arguments.
    pub types: Vec<ValType>,
    pub result: Option<ValType>,
}

#[derive(Clone, Debug)]
pub struct CompiledFunction {
    /// Index in the module's function space.
    pub func_index: u32,
    pub program: VisaProgram,
    pub metrics: MetricsRecord,
    pub loop_headers: Vec<LoopHeader>,
    pub call_returns: Vec<CallReturn>,
    /// `is_loop_header[pc]` for every vISA pc.
    pub is_loop_header: Vec<bool>,
    pub frame_slots: u32,
    pub config: CompilerConfig,
    /// Body bytes consumed by the compiler's reader.
    pub bytes_read: u32,
}

impl CompiledFunction {
    pub fn wasm_pc(&self, visa_pc: usize) -> u32 {
        self.program.src.get(visa_pc).copied().unwrap_or_else(|| self.program.src.last().copied().unwrap_or(0))
    }

    pub fn loop_header_at_wasm(&self, pc: u32) -> Option<&LoopHeader> {
        self.loop_headers.iter().find(|h| h.wasm_pc == pc)
    }

    pub fn loop_header_at_visa(&self, pc: u32) -> Option<&LoopHeader> {
        let i = self.loop_headers.partition_point(|h| h.visa_pc < pc);
        self.loop_headers.get(i).filter(|h| h.visa_pc == pc)
    }

    pub fn call_return_at_visa(&self, pc: u32) -> Option<&CallReturn> {
        let i = self.call_returns.partition_point(|h| h.visa_pc < pc);
        self.call_returns.get(i).filter(|h| h.visa_pc == pc)
    }

    pub fn disassemble(&self) -> String {
        self.program.disassemble()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Func,
    Block,
    Loop,
    If,
    Else,
    /// Opened inside unreachable code; only its nesting matters.
    Dead,
}

/// How control reaches an `if`'s else-arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ElseEdge {
    /// Never: the condition was a nonzero constant.
    None,
    /// Through a conditional branch to this label.
    Jump(Label),
    /// Directly: the condition was zero and the then-arm is dead.
    Direct,
}

struct Ctl {
    kind: Kind,
    result: Option<ValType>,
    /// Slot height (locals included) when the construct was entered.
    base: u32,
    label: Label,
    /// State every arrival must conform to, once fixed.
    merge: Option<StateSnapshot>,
    /// First arrival, kept until a second one decides the merge state.
    pending: Option<(Vec<AbstractValue>, Label)>,
    else_edge: ElseEdge,
    if_state: Option<StateSnapshot>,
}

/// A comparison whose result has not been materialized yet.
#[derive(Clone, Copy)]
struct PendingCmp {
    cond: Cond,
    w: Width,
    a: Reg,
    b: Opnd,
}

fn ret_reg(t: ValType) -> Reg {
    if t.is_float() {
        Reg::X0
    } else {
        Reg::R0
    }
}

/// Emits code placing the value `v` in `r`.
fn materialize(v: &AbstractValue, r: Reg, out: &mut impl Emit) {
    if let Some(s) = v.reg {
        if s != r {
            out.put(Instr::MovRR { dst: r, src: s });
        }
    } else if let Some(k) = v.konst {
        out.put(Instr::MovRI { dst: r, imm: k });
    } else if let Spill::StoredAt(n) = v.spill {
        out.put(Instr::LoadSlot { dst: r, slot: n });
    } else {
        unreachable!("value without location");
    }
}

fn ret_code(result: Option<&AbstractValue>, out: &mut impl Emit) {
    if let Some(v) = result {
        materialize(v, ret_reg(v.vtype), out);
    }
    out.put(Instr::Ret);
}

fn imm32(k: u64, w: Width) -> Option<i32> {
    match w {
        Width::W32 => Some(k as u32 as i32),
        Width::W64 => {
            let s = k as i64;
            (s >= i32::MIN as i64 && s <= i32::MAX as i64).then_some(s as i32)
        }
    }
}

fn int_type(w: Width) -> ValType {
    match w {
        Width::W32 => ValType::I32,
        Width::W64 => ValType::I64,
    }
}

fn float_type(w: Width) -> ValType {
    match w {
        Width::W32 => ValType::F32,
        Width::W64 => ValType::F64,
    }
}

fn mem_kind(opc: u8) -> MemKind {
    match opc {
        op::I32_LOAD | op::I32_STORE => MemKind::I32,
        op::I64_LOAD | op::I64_STORE => MemKind::I64,
        op::F32_LOAD | op::F32_STORE => MemKind::F32,
        op::F64_LOAD | op::F64_STORE => MemKind::F64,
        _ => MemKind::U8,
    }
}

fn conv_types(c: Conv) -> (ValType, ValType) {
    match c {
        Conv::WrapI64 => (ValType::I64, ValType::I32),
        Conv::ExtendI32S | Conv::ExtendI32U => (ValType::I32, ValType::I64),
        Conv::TruncF64S => (ValType::F64, ValType::I32),
        Conv::ConvertI32SToF64 => (ValType::I32, ValType::F64),
    }
}

/// What an integer operation reduces to when one operand is a known constant.
enum Reduced {
    Left,
    Right,
    Zero,
}

fn reduce(o: IntOp, w: Width, a: Option<u64>, b: Option<u64>) -> Option<Reduced> {
    let ones = w.norm(u64::MAX);
    let mask = w.bits() as u64 - 1;
    if let Some(k) = b {
        let r = match o {
            IntOp::Add | IntOp::Sub | IntOp::Or | IntOp::Xor if k == 0 => Some(Reduced::Left),
            IntOp::Shl | IntOp::ShrS | IntOp::ShrU if k & mask == 0 => Some(Reduced::Left),
            IntOp::Mul | IntOp::DivS | IntOp::DivU if k == 1 => Some(Reduced::Left),
            IntOp::And if k == ones => Some(Reduced::Left),
            IntOp::Mul | IntOp::And if k == 0 => Some(Reduced::Zero),
            IntOp::RemS | IntOp::RemU if k == 1 => Some(Reduced::Zero),
            _ => None,
        };
        if r.is_some() {
            return r;
        }
    }
    if let Some(k) = a {
        return match o {
            IntOp::Add | IntOp::Or | IntOp::Xor if k == 0 => Some(Reduced::Right),
            IntOp::Mul if k == 1 => Some(Reduced::Right),
            IntOp::And if k == ones => Some(Reduced::Right),
            IntOp::Mul | IntOp::And if k == 0 => Some(Reduced::Zero),
            _ => None,
        };
    }
    None
}

/// Whether `a op b` can trap given what is known about the operands.
fn may_trap(o: IntOp, w: Width, b: Option<u64>) -> bool {
    if !o.can_trap() {
        return false;
    }
    match b {
        None => true,
        Some(k) => k == 0 || (o == IntOp::DivS && k == w.norm(u64::MAX)),
    }
}

struct Compiler<'m> {
    m: &'m WasmModule,
    f: &'m WasmFunction,
    cfg: CompilerConfig,
    buf: CodeBuffer,
    st: AbstractState,
    ctl: Vec<Ctl>,
    reachable: bool,
    cmp: Option<PendingCmp>,
    stubs: Vec<(Label, Vec<Instr>)>,
    loop_headers: Vec<LoopHeader>,
    call_returns: Vec<CallReturn>,
    /// Pc just past the current instruction.
    next_pc: u32,
}

/// Binds arrival label `e` to code moving state `view` into merge state `m`
/// and jumping to `l`.
fn resolve(buf: &mut CodeBuffer, stubs: &mut Vec<(Label, Vec<Instr>)>, imm: bool, e: Label, view: &[AbstractValue], m: &[AbstractValue], l: Label) {
    let mut code = Vec::new();
    conform(view, m, imm, &mut code);
    if code.is_empty() {
        buf.alias(e, l);
    } else {
        code.push(Instr::Jmp { target: l });
        stubs.push((e, code));
    }
}

impl<'m> Compiler<'m> {
    fn imm(&self) -> bool {
        self.cfg.isel_imm
    }

    fn eager(&self) -> EagerTags {
        self.cfg.tagging.eager()
    }

    fn emit(&mut self, i: Instr) {
        self.buf.emit(i);
    }

    fn top(&self) -> u32 {
        self.st.height() - 1
    }

    /// Records a write to slot `i`, storing its tag under eager tagging.
    fn wrote(&mut self, i: u32) {
        let e = self.eager();
        if (self.st.is_local(i) && e.locals) || (!self.st.is_local(i) && e.operands) {
            let tag = self.st.slots[i as usize].vtype.tag();
            self.emit(Instr::StoreTag { slot: i, tag });
            self.st.slots[i as usize].tag_stored = true;
        }
    }

    fn push(&mut self, v: AbstractValue) {
        let i = self.st.push(v);
        self.wrote(i);
    }

    fn alloc(&mut self, float: bool, avoid: &[Reg]) -> Reg {
        self.st.alloc_reg(float, avoid, &mut self.buf)
    }

    fn to_reg(&mut self, i: u32, avoid: &[Reg]) -> Reg {
        self.st.to_reg(i, avoid, &mut self.buf)
    }

    fn push_const(&mut self, t: ValType, k: u64) {
        if self.cfg.track_consts {
            self.push(AbstractValue::konst(t, k));
        } else {
            let r = self.alloc(t.is_float(), &[]);
            self.emit(Instr::MovRI { dst: r, imm: k });
            self.push(AbstractValue::in_reg(t, r));
        }
    }

    /// Second ALU operand: an immediate when allowed, else a register.
    fn int_operand(&mut self, i: u32, w: Width, avoid: &[Reg]) -> Opnd {
        let v = self.st.slots[i as usize];
        if self.cfg.isel_imm && v.reg.is_none() {
            if let Some(imm) = v.konst.and_then(|k| imm32(k, w)) {
                return Opnd::Imm(imm);
            }
        }
        Opnd::Reg(self.to_reg(i, avoid))
    }

    /// Code that completes the frame image of the current state: every
    /// live value in its slot and every observed tag stored.
    fn completion_code(&self, out: &mut impl Emit) {
        let imm = self.imm();
        for (i, v) in self.st.slots.iter().enumerate() {
            let i = i as u32;
            if !v.is_stored_at(i) {
                if let Some(r) = v.reg {
                    out.put(Instr::StoreSlot { src: r, slot: i });
                } else if let Some(k) = v.konst {
                    store_const(out, i, v.vtype, k, imm);
                }
            }
            if !v.tag_stored && self.cfg.tagging.observed(self.st.is_local(i)) {
                out.put(Instr::StoreTag { slot: i, tag: v.vtype.tag() });
            }
        }
    }

    /// Completes the frame in place, as before a call.
    fn complete_frame(&mut self) {
        let mut code = Vec::new();
        self.completion_code(&mut code);
        for i in code {
            self.emit(i);
        }
        let tagging = self.cfg.tagging;
        let nl = self.st.num_locals;
        for (i, v) in self.st.slots.iter_mut().enumerate() {
            v.spill = Spill::StoredAt(i as u32);
            if tagging.observed((i as u32) < nl) {
                v.tag_stored = true;
            }
        }
    }

    /// Out-of-line exit for a trapping instruction, if the frame needs
    /// completing before the trap is raised.
    fn trap_exit(&mut self) -> Option<Label> {
        let mut code = Vec::new();
        self.completion_code(&mut code);
        if code.is_empty() {
            return None;
        }
        code.push(Instr::Trap { kind: None });
        let l = self.buf.new_label();
        self.stubs.push((l, code));
        Some(l)
    }

    fn flush_cmp(&mut self) {
        if let Some(c) = self.cmp.take() {
            let mut avoid = [c.a, c.a];
            if let Opnd::Reg(b) = c.b {
                avoid[1] = b;
            }
            let d = self.alloc(false, &avoid);
            self.emit(Instr::Cmp { w: c.w, a: c.a, b: c.b });
            self.emit(Instr::SetCc { cond: c.cond, dst: d });
            self.push(AbstractValue::in_reg(ValType::I32, d));
        }
    }

    fn target(&self, depth: u32) -> usize {
        self.ctl.len() - 1 - depth as usize
    }

    /// The state as seen by a branch to control entry `t`: the values it
    /// carries are moved down onto the entry's base height.
    fn view_for(&self, t: usize) -> Vec<AbstractValue> {
        let c = &self.ctl[t];
        let arity = if c.kind == Kind::Loop { 0 } else { c.result.is_some() as u32 };
        let h = self.st.height();
        let mut v = Vec::with_capacity((c.base + arity) as usize);
        v.extend_from_slice(&self.st.slots[..c.base as usize]);
        for k in 0..arity {
            let (o, n) = (h - arity + k, c.base + k);
            let mut x = self.st.slots[o as usize];
            if o != n {
                x.tag_stored = false;
            }
            v.push(x);
        }
        v
    }

    /// The value a branch to the function's label returns.
    fn result_of(&self, t: usize) -> Option<AbstractValue> {
        self.ctl[t].result.map(|_| *self.st.top())
    }

    /// Registers an arrival at control entry `t` from code that jumps to `e`.
    fn arrive(&mut self, t: usize, view: Vec<AbstractValue>, e: Label) {
        let imm = self.imm();
        if self.ctl[t].kind == Kind::Func {
            let mut code = Vec::new();
            ret_code(self.result_of(t).as_ref(), &mut code);
            self.stubs.push((e, code));
            return;
        }
        let (nl, eager) = (self.st.num_locals, self.eager());
        let c = &mut self.ctl[t];
        if c.merge.is_none() {
            match c.pending.take() {
                None => {
                    c.pending = Some((view, e));
                    return;
                }
                Some((s1, e1)) => {
                    let m = normalize(&s1, nl, eager);
                    resolve(&mut self.buf, &mut self.stubs, imm, e1, &s1, &m.slots, c.label);
                    c.merge = Some(m);
                }
            }
        }
        let m = c.merge.as_ref().expect("merge state");
        resolve(&mut self.buf, &mut self.stubs, imm, e, &view, &m.slots, c.label);
    }

    /// Unconditional branch.
    fn branch(&mut self, depth: u32) {
        let t = self.target(depth);
        if self.ctl[t].kind == Kind::Func {
            let v = self.result_of(t);
            ret_code(v.as_ref(), &mut self.buf);
        } else if let Some(m) = &self.ctl[t].merge {
            let view = self.view_for(t);
            conform(&view, &m.slots, self.cfg.isel_imm, &mut self.buf);
            let l = self.ctl[t].label;
            self.emit(Instr::Jmp { target: l });
        } else {
            let view = self.view_for(t);
            let e = self.buf.new_label();
            self.emit(Instr::Jmp { target: e });
            self.arrive(t, view, e);
        }
        self.reachable = false;
    }

    fn cond_branch(&mut self, depth: u32, (cond, w, a, b): (Cond, Width, Reg, Opnd)) {
        let t = self.target(depth);
        let view = self.view_for(t);
        let e = self.buf.new_label();
        self.emit(Instr::BrCc { cond, w, a, b, target: e });
        self.arrive(t, view, e);
    }

    /// Consumes an `i32` condition: either a runtime test that holds when the
    /// condition is true, or the condition's folded value.
    fn take_cond(&mut self) -> Result<(Cond, Width, Reg, Opnd), bool> {
        if let Some(c) = self.cmp.take() {
            return Ok((c.cond, c.w, c.a, c.b));
        }
        let i = self.top();
        if self.cfg.fold_consts {
            if let Some(k) = self.st.slots[i as usize].konst {
                self.st.pop();
                return Err(k as u32 != 0);
            }
        }
        let r = self.to_reg(i, &[]);
        self.st.pop();
        Ok((Cond::Ne, Width::W32, r, Opnd::Imm(0)))
    }

    fn drop_jmp(&mut self, l: Label) {
        let at_header = self.loop_headers.last().is_some_and(|h| h.visa_pc as usize + 1 == self.buf.len());
        if !at_header {
            self.buf.drop_trailing_jmp(l);
        }
    }

    fn push_ctl(&mut self, kind: Kind, result: Option<ValType>) {
        let label = self.buf.new_label();
        self.ctl.push(Ctl {
            kind,
            result,
            base: self.st.height(),
            label,
            merge: None,
            pending: None,
            else_edge: ElseEdge::None,
            if_state: None,
        });
    }

    fn enter_loop(&mut self, result: Option<ValType>) {
        let imm = self.imm();
        for i in 0..self.st.height() {
            self.st.spill(i, &mut self.buf, imm);
            let v = self.st.slots[i as usize];
            if !v.tag_stored && self.cfg.tagging.observed(self.st.is_local(i)) {
                self.emit(Instr::StoreTag { slot: i, tag: v.vtype.tag() });
                self.st.slots[i as usize].tag_stored = true;
            }
        }
        self.st.clear_regs();
        for v in &mut self.st.slots {
            v.konst = None;
        }
        self.push_ctl(Kind::Loop, result);
        let l = self.ctl.last().expect("loop").label;
        self.buf.bind(l);
        let snap = self.st.snapshot();
        self.loop_headers.push(LoopHeader {
            wasm_pc: self.next_pc,
            visa_pc: self.buf.len() as u32,
            types: snap.slots.iter().map(|v| v.vtype).collect(),
        });
        self.ctl.last_mut().expect("loop").merge = Some(snap);
    }

    fn enter_if(&mut self, result: Option<ValType>) {
        let edge = match self.take_cond() {
            Ok((cond, w, a, b)) => {
                let el = self.buf.new_label();
                self.emit(Instr::BrCc { cond: cond.negate(), w, a, b, target: el });
                ElseEdge::Jump(el)
            }
            Err(true) => ElseEdge::None,
            Err(false) => ElseEdge::Direct,
        };
        let snap = (edge != ElseEdge::None).then(|| self.st.snapshot());
        self.push_ctl(Kind::If, result);
        let c = self.ctl.last_mut().expect("if");
        c.else_edge = edge;
        c.if_state = snap;
        if edge == ElseEdge::Direct {
            self.reachable = false;
        }
    }

    fn enter_else(&mut self) {
        let t = self.ctl.len() - 1;
        if self.reachable {
            self.branch(0);
        }
        let c = &mut self.ctl[t];
        c.kind = Kind::Else;
        let edge = core::mem::replace(&mut c.else_edge, ElseEdge::None);
        let snap = c.if_state.take();
        match edge {
            ElseEdge::Jump(el) => {
                self.st.restore(&snap.expect("if state"));
                self.buf.bind(el);
                self.reachable = true;
            }
            ElseEdge::Direct => {
                self.st.restore(&snap.expect("if state"));
                self.reachable = true;
            }
            ElseEdge::None => self.reachable = false,
        }
    }

    /// `end` of a block, if or else-arm.
    fn end_forward(&mut self) {
        let t = self.ctl.len() - 1;
        let imm = self.imm();
        let (nl, eager) = (self.st.num_locals, self.eager());
        // an if without else falls through on its false edge
        if self.ctl[t].kind == Kind::If {
            let snap = self.ctl[t].if_state.take();
            match self.ctl[t].else_edge {
                ElseEdge::Jump(el) => {
                    let view = snap.expect("if state").slots;
                    self.arrive(t, view, el);
                }
                ElseEdge::Direct => {
                    debug_assert!(!self.reachable);
                    self.st.restore(&snap.expect("if state"));
                    self.reachable = true;
                }
                ElseEdge::None => {}
            }
        }
        let mut c = self.ctl.pop().expect("control entry");
        let l = c.label;
        if self.reachable {
            if let Some(m) = &c.merge {
                conform(&self.st.slots, &m.slots, imm, &mut self.buf);
                self.buf.bind(l);
                self.st.restore(m);
            } else if let Some((s1, e1)) = c.pending.take() {
                let mut m = meet(&s1, &self.st.slots, nl, eager);
                if self.cfg.fault == Some(Fault::BrokenMerge) {
                    for (x, y) in m.slots.iter_mut().zip(&s1) {
                        if x.konst.is_none() && y.konst.is_some() {
                            x.konst = y.konst;
                        }
                    }
                }
                conform(&self.st.slots, &m.slots, imm, &mut self.buf);
                resolve(&mut self.buf, &mut self.stubs, imm, e1, &s1, &m.slots, l);
                self.buf.bind(l);
                self.st.restore(&m);
            } else {
                self.buf.bind(l);
            }
        } else if let Some(m) = &c.merge {
            self.drop_jmp(l);
            self.buf.bind(l);
            self.st.restore(m);
            self.reachable = true;
        } else if let Some((s1, e1)) = c.pending.take() {
            self.drop_jmp(e1);
            self.buf.bind(e1);
            let m = settle(&s1);
            conform(&s1, &m.slots, imm, &mut self.buf);
            self.buf.bind(l);
            self.st.restore(&m);
            self.reachable = true;
        }
    }

    fn local_get(&mut self, i: u32) {
        let v = self.st.slots[i as usize];
        let t = v.vtype;
        if let Some(k) = v.konst {
            self.push(AbstractValue::konst(t, k));
        } else if let Some(r) = v.reg {
            if self.cfg.multi_reg {
                self.push(AbstractValue::in_reg(t, r));
            } else {
                let d = self.alloc(t.is_float(), &[r]);
                self.emit(Instr::MovRR { dst: d, src: r });
                self.push(AbstractValue::in_reg(t, d));
            }
        } else {
            let d = self.alloc(t.is_float(), &[]);
            self.emit(Instr::LoadSlot { dst: d, slot: i });
            if self.cfg.multi_reg {
                self.st.bind(i, d);
            }
            self.push(AbstractValue::in_reg(t, d));
        }
    }

    /// Gives local `i` a new value with the given locations.
    fn set_local(&mut self, i: u32, reg: Option<Reg>, konst: Option<u64>) {
        self.st.unbind(i);
        let old = self.st.slots[i as usize];
        self.st.slots[i as usize] = AbstractValue { spill: Spill::NotStored, reg: None, konst, tag_stored: old.tag_stored, vtype: old.vtype };
        if let Some(r) = reg {
            self.st.bind(i, r);
        }
        self.wrote(i);
    }

    /// True if the top value is already local `i`'s value.
    fn top_is_local(&self, i: u32) -> bool {
        let (v, l) = (self.st.top(), &self.st.slots[i as usize]);
        (v.reg.is_some() && v.reg == l.reg) || (v.konst.is_some() && v.konst == l.konst)
    }

    fn local_set(&mut self, i: u32) {
        if self.top_is_local(i) {
            self.st.pop();
            self.wrote(i);
            return;
        }
        let j = self.top();
        let v = self.st.slots[j as usize];
        let reg = if v.konst.is_some() || v.reg.is_some() { v.reg } else { Some(self.to_reg(j, &[])) };
        self.st.pop();
        self.set_local(i, reg, v.konst);
    }

    fn local_tee(&mut self, i: u32) {
        if self.top_is_local(i) {
            self.wrote(i);
            return;
        }
        let j = self.top();
        let v = self.st.slots[j as usize];
        if let Some(k) = v.konst {
            self.set_local(i, None, Some(k));
            return;
        }
        let r = self.to_reg(j, &[]);
        if self.cfg.multi_reg {
            self.set_local(i, Some(r), None);
        } else {
            self.st.unbind(i);
            let d = self.alloc(v.vtype.is_float(), &[r]);
            self.emit(Instr::MovRR { dst: d, src: r });
            self.set_local(i, Some(d), None);
        }
    }

    fn int_binop(&mut self, o: IntOp, w: Width) {
        let t = int_type(w);
        let j = self.st.height() - 2;
        let (a, b) = (self.st.slots[j as usize], self.st.slots[j as usize + 1]);
        if self.cfg.fold_consts {
            if let (Some(x), Some(y)) = (a.konst, b.konst) {
                if let Ok(v) = values::int_op(o, w, x, y) {
                    self.st.pop();
                    self.st.pop();
                    self.push(AbstractValue::konst(t, v));
                    return;
                }
            }
            match reduce(o, w, a.konst, b.konst) {
                Some(Reduced::Left) => {
                    self.st.pop();
                    return;
                }
                Some(Reduced::Right) => {
                    let r = if b.reg.is_none() && b.konst.is_none() { Some(self.to_reg(j + 1, &[])) } else { b.reg };
                    self.st.pop();
                    self.st.pop();
                    self.push(AbstractValue { spill: Spill::NotStored, reg: r, konst: b.konst, tag_stored: false, vtype: t });
                    return;
                }
                Some(Reduced::Zero) => {
                    self.st.pop();
                    self.st.pop();
                    self.push(AbstractValue::konst(t, 0));
                    return;
                }
                None => {}
            }
        }
        let swap = self.cfg.isel_imm
            && o.is_commutative()
            && a.konst.is_some()
            && a.reg.is_none()
            && (b.konst.is_none() || b.reg.is_some());
        let (ia, ib) = if swap { (j + 1, j) } else { (j, j + 1) };
        let kb = self.st.slots[ib as usize].konst;
        let rb = self.int_operand(ib, w, &[]);
        let avoid = match rb {
            Opnd::Reg(r) => Some(r),
            Opnd::Imm(_) => None,
        };
        let ra = self.to_reg(ia, avoid.as_slice());
        self.st.pop();
        self.st.pop();
        let d = self.alloc(false, &[]);
        let fault = if may_trap(o, w, kb) { self.trap_exit() } else { None };
        self.emit(Instr::Alu { op: o, w, dst: d, a: ra, b: rb, fault });
        self.push(AbstractValue::in_reg(t, d));
    }

    fn float_binop(&mut self, o: FloatOp, w: Width) {
        let t = float_type(w);
        let j = self.st.height() - 2;
        let (a, b) = (self.st.slots[j as usize], self.st.slots[j as usize + 1]);
        if self.cfg.fold_consts {
            if let (Some(x), Some(y)) = (a.konst, b.konst) {
                self.st.pop();
                self.st.pop();
                self.push(AbstractValue::konst(t, values::float_op(o, w, x, y)));
                return;
            }
        }
        let rb = self.to_reg(j + 1, &[]);
        let ra = self.to_reg(j, &[rb]);
        self.st.pop();
        self.st.pop();
        let d = self.alloc(true, &[]);
        self.emit(Instr::FAlu { op: o, w, dst: d, a: ra, b: rb });
        self.push(AbstractValue::in_reg(t, d));
    }

    fn float_unop(&mut self, o: FUnOp, w: Width) {
        let t = float_type(w);
        let j = self.top();
        if self.cfg.fold_consts {
            if let Some(x) = self.st.slots[j as usize].konst {
                self.st.pop();
                self.push(AbstractValue::konst(t, values::float_unop(o, w, x)));
                return;
            }
        }
        let ra = self.to_reg(j, &[]);
        self.st.pop();
        let d = self.alloc(true, &[]);
        self.emit(Instr::FUn { op: o, w, dst: d, a: ra });
        self.push(AbstractValue::in_reg(t, d));
    }

    fn convert(&mut self, c: Conv) {
        let (_, to) = conv_types(c);
        let j = self.top();
        if self.cfg.fold_consts {
            if let Some(x) = self.st.slots[j as usize].konst {
                if let Ok(v) = values::convert(c, x) {
                    self.st.pop();
                    self.push(AbstractValue::konst(to, v));
                    return;
                }
            }
        }
        let ra = self.to_reg(j, &[]);
        self.st.pop();
        let d = self.alloc(to.is_float(), &[]);
        let fault = if c == Conv::TruncF64S { self.trap_exit() } else { None };
        self.emit(Instr::Cvt { op: c, dst: d, src: ra, fault });
        self.push(AbstractValue::in_reg(to, d));
    }

    fn compare(&mut self, cond: Cond, w: Width) {
        let j = self.st.height() - 2;
        let (a, b) = (self.st.slots[j as usize], self.st.slots[j as usize + 1]);
        if self.cfg.fold_consts {
            if let (Some(x), Some(y)) = (a.konst, b.konst) {
                self.st.pop();
                self.st.pop();
                self.push(AbstractValue::konst(ValType::I32, values::cond(cond, w, x, y) as u64));
                return;
            }
        }
        let (cond, ia, ib) = if !cond.is_float() && self.cfg.isel_imm && a.konst.is_some() && a.reg.is_none() && b.konst.is_none() {
            (cond.swap(), j + 1, j)
        } else {
            (cond, j, j + 1)
        };
        let rb = if cond.is_float() { Opnd::Reg(self.to_reg(ib, &[])) } else { self.int_operand(ib, w, &[]) };
        let avoid = match rb {
            Opnd::Reg(r) => Some(r),
            Opnd::Imm(_) => None,
        };
        let ra = self.to_reg(ia, avoid.as_slice());
        self.st.pop();
        self.st.pop();
        self.cmp = Some(PendingCmp { cond, w, a: ra, b: rb });
    }

    /// `eqz` and `ref.is_null`: compare against zero.
    fn test_zero(&mut self, w: Width) {
        let j = self.top();
        if self.cfg.fold_consts {
            if let Some(x) = self.st.slots[j as usize].konst {
                self.st.pop();
                self.push(AbstractValue::konst(ValType::I32, (w.norm(x) == 0) as u64));
                return;
            }
        }
        let ra = self.to_reg(j, &[]);
        self.st.pop();
        self.cmp = Some(PendingCmp { cond: Cond::Eq, w, a: ra, b: Opnd::Imm(0) });
    }

    fn select(&mut self) {
        let ci = self.top();
        if self.cfg.fold_consts {
            if let Some(k) = self.st.slots[ci as usize].konst {
                self.st.pop();
                if k as u32 != 0 {
                    self.st.pop();
                } else {
                    let bv = self.st.slots[ci as usize - 1];
                    let r = if bv.reg.is_none() && bv.konst.is_none() { Some(self.to_reg(ci - 1, &[])) } else { bv.reg };
                    self.st.pop();
                    self.st.pop();
                    self.push(AbstractValue { spill: Spill::NotStored, reg: r, konst: bv.konst, tag_stored: false, vtype: bv.vtype });
                }
                return;
            }
        }
        let rc = self.to_reg(ci, &[]);
        // to_reg may have evicted an operand's register
        let (av, bv) = (self.st.slots[ci as usize - 2], self.st.slots[ci as usize - 1]);
        self.st.pop();
        self.st.pop();
        self.st.pop();
        let mut avoid = [rc; 3];
        if let Some(r) = av.reg {
            avoid[1] = r;
        }
        if let Some(r) = bv.reg {
            avoid[2] = r;
        }
        let d = self.alloc(av.vtype.is_float(), &avoid);
        materialize(&av, d, &mut self.buf);
        let skip = self.buf.new_label();
        self.emit(Instr::BrCc { cond: Cond::Ne, w: Width::W32, a: rc, b: Opnd::Imm(0), target: skip });
        materialize(&bv, d, &mut self.buf);
        self.buf.bind(skip);
        self.push(AbstractValue::in_reg(av.vtype, d));
    }

    fn call(&mut self, fi: u32) {
        let ft = self.m.func_type(fi).expect("validated call");
        let (n, result) = (ft.params.len() as u32, ft.result);
        let h = self.st.height();
        self.complete_frame();
        if fi < self.m.imports.len() as u32 {
            self.emit(Instr::HostCall { import: fi, h });
        } else {
            self.emit(Instr::Call { func: fi, h });
        }
        self.st.clear_regs();
        for _ in 0..n {
            self.st.pop();
        }
        self.call_returns.push(CallReturn {
            visa_pc: self.buf.len() as u32,
            wasm_pc: self.next_pc,
            types: self.st.slots.iter().map(|v| v.vtype).collect(),
            result,
        });
        if let Some(t) = result {
            self.push(AbstractValue::in_reg(t, ret_reg(t)));
        }
    }

    fn br_table(&mut self, targets: &[u32], default: u32) {
        let i = self.top();
        if self.cfg.fold_consts {
            if let Some(k) = self.st.slots[i as usize].konst {
                self.st.pop();
                let d = targets.get(k as u32 as usize).copied().unwrap_or(default);
                self.branch(d);
                return;
            }
        }
        let r = self.to_reg(i, &[]);
        self.st.pop();
        let mut labels = Vec::with_capacity(targets.len() + 1);
        for &d in targets.iter().chain(core::iter::once(&default)) {
            let t = self.target(d);
            let view = self.view_for(t);
            let e = self.buf.new_label();
            self.arrive(t, view, e);
            labels.push(e);
        }
        self.emit(Instr::BrTable { idx: r, targets: labels });
        self.reachable = false;
    }

    fn load(&mut self, opc: u8, offset: u32) {
        let (_, t) = mem_access(opc).expect("load opcode");
        let ra = self.to_reg(self.top(), &[]);
        self.st.pop();
        let d = self.alloc(t.is_float(), &[]);
        let fault = self.trap_exit();
        self.emit(Instr::Load { kind: mem_kind(opc), dst: d, addr: ra, offset, fault });
        self.push(AbstractValue::in_reg(t, d));
    }

    fn store(&mut self, opc: u8, offset: u32) {
        let j = self.top();
        let rv = self.to_reg(j, &[]);
        let ra = self.to_reg(j - 1, &[rv]);
        self.st.pop();
        self.st.pop();
        let fault = self.trap_exit();
        self.emit(Instr::Store { kind: mem_kind(opc), src: rv, addr: ra, offset, fault });
    }

    fn global_get(&mut self, g: u32) {
        let gl = self.m.globals[g as usize];
        if !gl.mutable && self.cfg.track_consts {
            self.push(AbstractValue::konst(gl.ty, gl.init));
        } else {
            let d = self.alloc(gl.ty.is_float(), &[]);
            self.emit(Instr::LoadGlobal { dst: d, idx: g });
            self.push(AbstractValue::in_reg(gl.ty, d));
        }
    }

    fn prologue(&mut self) {
        let f = self.f;
        for (i, &t) in f.local_types.iter().enumerate() {
            let i = i as u32;
            if i < f.num_params {
                let mut v = AbstractValue::stored(t, i);
                v.tag_stored = true;
                self.st.push(v);
            } else if self.cfg.track_consts {
                self.push(AbstractValue::konst(t, 0));
            } else {
                if i == f.num_params {
                    self.emit(Instr::MovRI { dst: Reg::SCRATCH, imm: 0 });
                }
                self.emit(Instr::StoreSlot { src: Reg::SCRATCH, slot: i });
                self.push(AbstractValue::stored(t, i));
            }
        }
    }

    fn instr(&mut self, o: Op) {
        match o {
            Op::Unreachable => {
                self.complete_frame();
                self.emit(Instr::Trap { kind: Some(values::TrapKind::Unreachable) });
                self.reachable = false;
            }
            Op::Nop => {}
            Op::Block(bt) => self.push_ctl(Kind::Block, bt),
            Op::Loop(bt) => self.enter_loop(bt),
            Op::If(bt) => self.enter_if(bt),
            Op::Else => self.enter_else(),
            Op::End => match self.ctl.last().expect("control entry").kind {
                Kind::Func => {
                    let v = self.result_of(0);
                    ret_code(v.as_ref(), &mut self.buf);
                    self.ctl.pop();
                }
                Kind::Loop => {
                    self.ctl.pop();
                }
                _ => self.end_forward(),
            },
            Op::Br(d) => self.branch(d),
            Op::BrIf(d) => match self.take_cond() {
                Ok(test) => self.cond_branch(d, test),
                Err(true) => self.branch(d),
                Err(false) => {}
            },
            Op::BrTable(ts, d) => self.br_table(&ts, d),
            Op::Return => self.branch(self.ctl.len() as u32 - 1),
            Op::Call(fi) => self.call(fi),
            Op::Drop => {
                self.st.pop();
            }
            Op::Select => self.select(),
            Op::LocalGet(i) => self.local_get(i),
            Op::LocalSet(i) => self.local_set(i),
            Op::LocalTee(i) => self.local_tee(i),
            Op::GlobalGet(g) => self.global_get(g),
            Op::GlobalSet(g) => {
                let r = self.to_reg(self.top(), &[]);
                self.st.pop();
                self.emit(Instr::StoreGlobal { src: r, idx: g });
            }
            Op::Load(opc, ma) => self.load(opc, ma.offset),
            Op::Store(opc, ma) => self.store(opc, ma.offset),
            Op::MemorySize => {
                let d = self.alloc(false, &[]);
                self.emit(Instr::MemSize { dst: d });
                self.push(AbstractValue::in_reg(ValType::I32, d));
            }
            Op::MemoryGrow => {
                let r = self.to_reg(self.top(), &[]);
                self.st.pop();
                let d = self.alloc(false, &[]);
                self.emit(Instr::MemGrow { dst: d, src: r });
                self.push(AbstractValue::in_reg(ValType::I32, d));
            }
            Op::I32Const(v) => self.push_const(ValType::I32, v as u32 as u64),
            Op::I64Const(v) => self.push_const(ValType::I64, v as u64),
            Op::F32Const(b) => self.push_const(ValType::F32, b as u64),
            Op::F64Const(b) => self.push_const(ValType::F64, b),
            Op::RefNull => self.push_const(ValType::Ref, 0),
            Op::RefIsNull => self.test_zero(Width::W64),
            Op::Plain(opc) => match values::classify(opc).expect("validated opcode") {
                Numeric::Int(o, w) => self.int_binop(o, w),
                Numeric::Float(o, w) => self.float_binop(o, w),
                Numeric::Cmp(c, w) => self.compare(c, w),
                Numeric::Eqz(w) => self.test_zero(w),
                Numeric::FUn(o, w) => self.float_unop(o, w),
                Numeric::Conv(c) => self.convert(c),
            },
        }
    }

    /// Tracks nesting while skipping unreachable code.
    fn skip(&mut self, o: &Op) {
        match o {
            Op::Block(_) | Op::Loop(_) | Op::If(_) => self.push_ctl(Kind::Dead, None),
            Op::Else if self.ctl.last().expect("control entry").kind != Kind::Dead => self.enter_else(),
            Op::End => match self.ctl.last().expect("control entry").kind {
                Kind::Dead | Kind::Loop | Kind::Func => {
                    self.ctl.pop();
                }
                _ => self.end_forward(),
            },
            _ => {}
        }
    }

    fn run(&mut self) -> u32 {
        let f = self.f;
        let body_start = f.body.start;
        let mut r = Reader::at(&self.m.bytes[..f.body.end], body_start + f.code_offset as usize);
        self.prologue();
        self.push_ctl(Kind::Func, self.m.types[f.type_idx as usize].result);
        self.ctl[0].base = self.st.num_locals;
        let limit = f.num_locals() + f.max_stack_height;
        while !self.ctl.is_empty() {
            let pc = (r.pos() - body_start) as u32;
            let o = read_op(&mut r).expect("validated body");
            self.next_pc = (r.pos() - body_start) as u32;
            self.buf.set_source(pc);
            if !self.reachable {
                self.skip(&o);
                continue;
            }
            if self.cmp.is_some() && !matches!(o, Op::BrIf(_) | Op::If(_)) {
                self.flush_cmp();
            }
            self.instr(o);
            debug_assert!(self.st.height() <= limit, "stack height above validated maximum");
            debug_assert_eq!(self.st.check(self.cfg.track_consts), Ok(()));
        }
        (r.pos() - (body_start + f.code_offset as usize)) as u32
    }
}

/// Compiles defined function `func_index` (a function-space index).
///
/// Panics if the function is an import or the module was not validated.
pub fn compile_function(m: &WasmModule, func_index: u32, cfg: &CompilerConfig) -> CompiledFunction {
    assert!(m.validated, "module must be validated");
    assert!(cfg.is_valid(), "inconsistent compiler configuration");
    let f = m.defined(func_index).expect("defined function");
    let mut c = Compiler {
        m,
        f,
        cfg: *cfg,
        buf: CodeBuffer::new(),
        st: AbstractState::new(f.num_locals(), cfg.multi_reg),
        ctl: Vec::new(),
        reachable: true,
        cmp: None,
        stubs: Vec::new(),
        loop_headers: Vec::new(),
        call_returns: Vec::new(),
        next_pc: 0,
    };
    let consumed = c.run();
    debug_assert_eq!(consumed as usize, f.body.end - f.body.start - f.code_offset as usize, "each body byte is read exactly once");
    for (l, code) in core::mem::take(&mut c.stubs) {
        c.buf.bind(l);
        for i in code {
            c.buf.emit(i);
        }
    }
    let program = c.buf.finalize().expect("all labels bound");
    let mut is_loop_header = alloc::vec![false; program.instrs.len() + 1];
    for h in &c.loop_headers {
        is_loop_header[h.visa_pc as usize] = true;
    }
    let metrics = MetricsRecord::of_program(&program, (f.body.end - f.body.start) as u64);
    CompiledFunction {
        func_index,
        program,
        metrics,
        loop_headers: c.loop_headers,
        call_returns: c.call_returns,
        is_loop_header,
        frame_slots: f.frame_slots(),
        config: *cfg,
        bytes_read: consumed,
    }
}

/// Compiles every defined function, indexed by defined-function position.
pub fn compile_module(m: &WasmModule, cfg: &CompilerConfig) -> Vec<CompiledFunction> {
    let n = m.imports.len() as u32;
    (0..m.functions.len() as u32).map(|i| compile_function(m, n + i, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wasm::builder::{FuncBody, ModuleBuilder};
    use alloc::string::ToString;
    use alloc::vec;
    use ValType::*;

    fn module(params: &[ValType], result: Option<ValType>, locals: &[(u32, ValType)], ops: &[Op]) -> WasmModule {
        let mut b = ModuleBuilder::new();
        let t = b.add_type(params, result);
        let cb = b.add_type(&[I32], None);
        b.import_func("env", "sink", cb);
        b.add_memory(1, None);
        b.add_function(t, locals, FuncBody::from_ops(ops));
        WasmModule::load(&b.build().unwrap()).unwrap()
    }

    /// Compiled instructions as text, without pcs and source positions.
    fn asm(cfg: CompilerConfig, params: &[ValType], result: Option<ValType>, locals: &[(u32, ValType)], ops: &[Op]) -> Vec<String> {
        let m = module(params, result, locals, ops);
        let cf = compile_function(&m, 1, &cfg);
        (0..cf.program.instrs.len()).map(|pc| cf.program.disassemble_one(pc)).collect()
    }

    fn count(code: &[String], prefix: &str) -> usize {
        code.iter().filter(|l| l.starts_with(prefix)).count()
    }

    const ADD: Op = Op::Plain(op::I32_ADD);

    #[test]
    fn add_with_constant_uses_immediate() {
        let code = asm(CompilerConfig::allopt(), &[I32, I32], Some(I32), &[], &[Op::LocalGet(0), Op::LocalGet(1), ADD, Op::I32Const(5), ADD]);
        assert_eq!(code, vec!["load.slot r0, [vfp+0]", "load.slot r1, [vfp+1]", "add32 r2, r0, r1", "add32 r2, r2, #5", "mov r0, r2", "ret"]);
    }

    #[test]
    fn constants_fold() {
        let code = asm(CompilerConfig::allopt(), &[], Some(I32), &[], &[Op::I32Const(2), Op::I32Const(3), ADD]);
        assert_eq!(code, vec!["mov r0, #5", "ret"]);
    }

    #[test]
    fn adding_zero_emits_no_add() {
        let ops = [Op::LocalGet(0), Op::I32Const(0), ADD];
        let code = asm(CompilerConfig::allopt(), &[I32], Some(I32), &[], &ops);
        assert_eq!(count(&code, "add"), 0);
        let code = asm(CompilerConfig::nok(), &[I32], Some(I32), &[], &ops);
        assert_eq!(count(&code, "add32"), 1);
        let code = asm(CompilerConfig::nokfold(), &[I32], Some(I32), &[], &ops);
        assert!(code.contains(&"add32 r1, r0, #0".to_string()), "{code:?}");
    }

    #[test]
    fn repeated_local_get_shares_register() {
        let ops = [Op::LocalGet(0), Op::LocalGet(0), ADD];
        let code = asm(CompilerConfig::allopt(), &[I32], Some(I32), &[], &ops);
        assert_eq!(count(&code, "load.slot"), 1);
        assert_eq!(count(&code, "mov r1, r0"), 0);
        // without multi-register binding each use reloads the slot
        let code = asm(CompilerConfig::nomr(), &[I32], Some(I32), &[], &ops);
        assert_eq!(count(&code, "load.slot"), 2, "{code:?}");
    }

    #[test]
    fn constant_branch_conditions_fold() {
        let taken = asm(CompilerConfig::allopt(), &[], None, &[], &[Op::Block(None), Op::I32Const(1), Op::BrIf(0), Op::Unreachable, Op::End]);
        assert_eq!(count(&taken, "cmp"), 0);
        assert_eq!(count(&taken, "br."), 0);
        assert_eq!(count(&taken, "trap"), 0, "{taken:?}");
        let never = asm(CompilerConfig::allopt(), &[], None, &[], &[Op::Block(None), Op::I32Const(0), Op::BrIf(0), Op::End]);
        assert_eq!(never, vec!["ret"]);
    }

    #[test]
    fn eqz_fuses_into_branch() {
        let code = asm(CompilerConfig::allopt(), &[I32], None, &[], &[Op::Block(None), Op::LocalGet(0), Op::Plain(op::I32_EQZ), Op::BrIf(0), Op::End]);
        assert_eq!(count(&code, "br.eq32"), 1, "{code:?}");
        assert_eq!(count(&code, "set."), 0);
        assert_eq!(count(&code, "cmp"), 0);
    }

    #[test]
    fn compare_result_materializes_when_used_as_value() {
        let code = asm(CompilerConfig::allopt(), &[I32, I32], Some(I32), &[], &[Op::LocalGet(0), Op::LocalGet(1), Op::Plain(op::I32_LT_S)]);
        assert_eq!(count(&code, "cmp32"), 1);
        assert_eq!(count(&code, "set.lt_s"), 1, "{code:?}");
    }

    fn call_ops() -> [Op; 4] {
        [Op::I32Const(7), Op::LocalGet(0), Op::Call(0), Op::Drop]
    }

    #[test]
    fn call_stores_values_and_tags_on_demand() {
        let code = asm(CompilerConfig::allopt(), &[I32], None, &[], &call_ops());
        // param 0 is already in its slot and tagged; the two operands are not
        assert_eq!(count(&code, "store.slot"), 2, "{code:?}");
        assert_eq!(count(&code, "store.tag"), 2);
        assert_eq!(count(&code, "hostcall i0, h=3"), 1);
    }

    #[test]
    fn notags_stores_no_tags() {
        let code = asm(CompilerConfig::allopt().with_tagging(Tagging::None), &[I32], None, &[], &call_ops());
        assert_eq!(count(&code, "store.tag"), 0);
        assert_eq!(count(&code, "store.slot"), 2);
    }

    #[test]
    fn eager_tags_store_on_every_push() {
        let ops = [Op::I32Const(1), Op::I32Const(2), ADD, Op::Drop];
        let code = asm(CompilerConfig::allopt().with_tagging(Tagging::Eager), &[], None, &[], &ops);
        assert_eq!(count(&code, "store.tag"), 3);
        let code = asm(CompilerConfig::allopt(), &[], None, &[], &ops);
        assert_eq!(count(&code, "store.tag"), 0);
    }

    #[test]
    fn lazy_tags_skip_locals_at_calls() {
        let ops = [Op::I32Const(3), Op::LocalSet(1), Op::LocalGet(0), Op::Call(0)];
        let on_demand = asm(CompilerConfig::allopt(), &[I32], None, &[(1, I32)], &ops);
        let lazy = asm(CompilerConfig::allopt().with_tagging(Tagging::Lazy), &[I32], None, &[(1, I32)], &ops);
        assert_eq!(count(&on_demand, "store.tag"), count(&lazy, "store.tag") + 1);
    }

    fn if_arms(a: i32, b: i32) -> Vec<String> {
        asm(
            CompilerConfig::allopt(),
            &[I32],
            Some(I32),
            &[(1, I32)],
            &[Op::LocalGet(0), Op::If(None), Op::I32Const(a), Op::LocalSet(1), Op::Else, Op::I32Const(b), Op::LocalSet(1), Op::End, Op::LocalGet(1), Op::I32Const(1), ADD],
        )
    }

    #[test]
    fn equal_constants_survive_if_merge() {
        let code = if_arms(4, 4);
        assert_eq!(count(&code, "add"), 0, "{code:?}");
        assert!(code.contains(&"mov r0, #5".to_string()));
    }

    #[test]
    fn different_constants_merge_into_register() {
        let code = if_arms(4, 9);
        assert_eq!(count(&code, "add32"), 1, "{code:?}");
        assert_eq!(count(&code, "mov r"), 3);
    }

    #[test]
    fn loop_entry_spills_constant_local() {
        let code = asm(
            CompilerConfig::allopt(),
            &[],
            None,
            &[(1, I32)],
            &[Op::I32Const(5), Op::LocalSet(0), Op::Loop(None), Op::LocalGet(0), Op::BrIf(0), Op::End],
        );
        assert_eq!(code[0], "store.slot32 #5, [vfp+0]");
        assert_eq!(code[1], "store.tag #1, [vfp+0]");
        assert_eq!(code[2], "load.slot r0, [vfp+0]");
        assert_eq!(code[3], "br.ne32 r0, #0, @0002");
    }

    #[test]
    fn loop_header_is_recorded() {
        let m = module(&[I32], None, &[], &[Op::Loop(None), Op::LocalGet(0), Op::BrIf(0), Op::End]);
        let cf = compile_function(&m, 1, &CompilerConfig::allopt());
        assert_eq!(cf.loop_headers.len(), 1);
        let h = &cf.loop_headers[0];
        assert_eq!(h.types, vec![I32]);
        assert!(cf.is_loop_header[h.visa_pc as usize]);
        assert_eq!(cf.loop_header_at_visa(h.visa_pc), Some(h));
        assert_eq!(cf.loop_header_at_wasm(h.wasm_pc), Some(h));
    }

    #[test]
    fn division_gets_trap_exit_only_when_needed() {
        let ops = |k: i32| [Op::I32Const(7), Op::LocalGet(0), Op::Call(0), Op::LocalGet(0), Op::I32Const(k), Op::Plain(op::I32_DIV_U), Op::Drop, Op::Drop];
        let by_var = asm(CompilerConfig::allopt(), &[I32], None, &[], &[Op::LocalGet(0), Op::LocalGet(0), Op::Plain(op::I32_DIV_U), Op::Drop]);
        assert!(by_var.iter().any(|l| l.starts_with("div_u32") && !l.contains('!')), "{by_var:?}");
        let by_two = asm(CompilerConfig::allopt(), &[I32], None, &[], &ops(2)[..]);
        assert!(by_two.iter().any(|l| l.starts_with("div_u32") && !l.contains('!')), "{by_two:?}");
        let pending = asm(CompilerConfig::allopt(), &[I32], None, &[], &[Op::I32Const(1), Op::LocalGet(0), Op::LocalGet(0), Op::Plain(op::I32_DIV_U), Op::Drop, Op::Drop]);
        assert!(pending.iter().any(|l| l.starts_with("div_u32") && l.contains('!')), "{pending:?}");
        assert_eq!(count(&pending, "trap latched"), 1);
    }

    #[test]
    fn every_byte_read_once() {
        let m = module(&[I32], Some(I32), &[(2, I64)], &[Op::LocalGet(0), Op::If(Some(I32)), Op::I32Const(1), Op::Else, Op::I32Const(2), Op::End]);
        let f = &m.functions[0];
        let cf = compile_function(&m, 1, &CompilerConfig::allopt());
        assert_eq!(cf.bytes_read as usize, f.body.end - f.body.start - f.code_offset as usize);
    }

    #[test]
    fn compilation_is_deterministic() {
        let ops = [Op::LocalGet(0), Op::If(Some(I32)), Op::I32Const(1), Op::Else, Op::LocalGet(0), Op::Call(0), Op::I32Const(2), Op::End];
        let m = module(&[I32], Some(I32), &[], &ops);
        for cfg in [CompilerConfig::allopt(), CompilerConfig::nok(), CompilerConfig::nomr()] {
            let a = compile_function(&m, 1, &cfg).disassemble();
            let b = compile_function(&m, 1, &cfg).disassemble();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn config_names_round_trip() {
        for base in [CompilerConfig::allopt(), CompilerConfig::nok(), CompilerConfig::nokfold(), CompilerConfig::noisel(), CompilerConfig::nomr()] {
            for t in Tagging::ALL {
                let c = base.with_tagging(t);
                assert_eq!(CompilerConfig::parse(&c.name()), Some(c), "{}", c.name());
            }
        }
        assert_eq!(CompilerConfig::allopt().name(), "allopt");
        assert_eq!(CompilerConfig::nok().with_tagging(Tagging::Lazy).name(), "nok+lazytags");
        for n in CompilerConfig::ABLATIONS {
            assert_eq!(CompilerConfig::parse(n).unwrap().name(), n);
        }
    }
}
