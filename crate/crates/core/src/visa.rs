//! The virtual target ISA: instructions, a code buffer with label patching and
//! a source map, and the disassembler.
//!
//! Registers `r0`..`r7` and `x0`..`x7` are allocatable; `r8` and `x8` are
//! scratch registers reserved for the compiler's move sequences. Frame slots
//! are addressed relative to the value frame pointer (`[vfp+N]`).

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::{self, Write};

use crate::values::{Conv, Cond, FUnOp, FloatOp, IntOp, TrapKind, Width};

/// Number of allocatable registers per class.
pub const NUM_REGS: u8 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Reg(pub u8);

impl Reg {
    pub const SCRATCH: Reg = Reg(8);
    pub const FSCRATCH: Reg = Reg(16 + 8);
    pub const R0: Reg = Reg(0);
    pub const X0: Reg = Reg(16);

    pub fn int(i: u8) -> Reg {
        Reg(i)
    }

    pub fn float(i: u8) -> Reg {
        Reg(16 + i)
    }

    pub fn is_float(self) -> bool {
        self.0 >= 16
    }

    /// Index within the register's class.
    pub fn index(self) -> u8 {
        self.0 & 15
    }

    /// Dense index over the allocatable registers of both classes.
    pub fn dense(self) -> usize {
        (self.index() + if self.is_float() { NUM_REGS } else { 0 }) as usize
    }

    pub fn from_dense(i: usize) -> Reg {
        if i < NUM_REGS as usize {
            Reg::int(i as u8)
        } else {
            Reg::float(i as u8 - NUM_REGS)
        }
    }

    pub fn scratch_for(self) -> Reg {
        if self.is_float() {
            Reg::FSCRATCH
        } else {
            Reg::SCRATCH
        }
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", if self.is_float() { 'x' } else { 'r' }, self.index())
    }
}

/// Second operand of ALU and compare instructions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Opnd {
    Reg(Reg),
    /// 32-bit immediate, sign-extended to the operation width.
    Imm(i32),
}

impl fmt::Display for Opnd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Opnd::Reg(r) => r.fmt(f),
            Opnd::Imm(i) => write!(f, "#{i}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label(pub u32);

/// Access size and extension of a memory instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MemKind {
    I32,
    I64,
    F32,
    F64,
    /// One byte, zero-extended on load.
    U8,
}

impl MemKind {
    pub fn size(self) -> u32 {
        match self {
            MemKind::U8 => 1,
            MemKind::I32 | MemKind::F32 => 4,
            MemKind::I64 | MemKind::F64 => 8,
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            MemKind::I32 => "i32",
            MemKind::I64 => "i64",
            MemKind::F32 => "f32",
            MemKind::F64 => "f64",
            MemKind::U8 => "u8",
        }
    }
}

/// One vISA instruction. `fault` labels on guarded instructions receive
/// control (with the fault latched) instead of trapping immediately.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Instr {
    MovRR { dst: Reg, src: Reg },
    MovRI { dst: Reg, imm: u64 },
    LoadSlot { dst: Reg, slot: u32 },
    StoreSlot { src: Reg, slot: u32 },
    /// Stores an immediate: zero-extended for `W32`, sign-extended for `W64`.
    StoreSlotImm { slot: u32, imm: i32, w: Width },
    StoreTag { slot: u32, tag: u8 },
    Alu { op: IntOp, w: Width, dst: Reg, a: Reg, b: Opnd, fault: Option<Label> },
    FAlu { op: FloatOp, w: Width, dst: Reg, a: Reg, b: Reg },
    FUn { op: FUnOp, w: Width, dst: Reg, a: Reg },
    Cvt { op: Conv, dst: Reg, src: Reg, fault: Option<Label> },
    /// Latches both operands in the flags for a following `set.cc`.
    Cmp { w: Width, a: Reg, b: Opnd },
    SetCc { cond: Cond, dst: Reg },
    BrCc { cond: Cond, w: Width, a: Reg, b: Opnd, target: Label },
    Jmp { target: Label },
    /// Jumps to `targets[min(idx, len - 1)]`.
    BrTable { idx: Reg, targets: Vec<Label> },
    /// Calls `func` with a callee frame starting at slot `h - params`.
    Call { func: u32, h: u32 },
    HostCall { import: u32, h: u32 },
    Ret,
    Load { kind: MemKind, dst: Reg, addr: Reg, offset: u32, fault: Option<Label> },
    Store { kind: MemKind, src: Reg, addr: Reg, offset: u32, fault: Option<Label> },
    MemSize { dst: Reg },
    MemGrow { dst: Reg, src: Reg },
    LoadGlobal { dst: Reg, idx: u32 },
    StoreGlobal { src: Reg, idx: u32 },
    /// Traps with `kind`, or with the latched fault when `None`.
    Trap { kind: Option<TrapKind> },
}

fn fits_i32(v: u64) -> bool {
    v as i64 >= i32::MIN as i64 && v as i64 <= i32::MAX as i64
}

impl Instr {
    /// Execution cost in the emulator's cost model.
    pub fn cost(&self) -> u64 {
        match self {
            Instr::Load { .. } | Instr::Store { .. } | Instr::MemSize { .. } | Instr::MemGrow { .. } => 2,
            Instr::Call { .. } | Instr::HostCall { .. } => 5,
            _ => 1,
        }
    }

    /// Size in the virtual encoding: a 4-byte base word, 4 more per 32-bit
    /// operand and 8 more for a 64-bit immediate.
    pub fn encoded_size(&self) -> u32 {
        let opt = |l: &Option<Label>| if l.is_some() { 4 } else { 0 };
        let imm = |o: &Opnd| if matches!(o, Opnd::Imm(_)) { 4 } else { 0 };
        match self {
            Instr::MovRR { .. } | Instr::FAlu { .. } | Instr::FUn { .. } | Instr::SetCc { .. } | Instr::Ret => 4,
            Instr::MovRI { imm, .. } => {
                if fits_i32(*imm) {
                    8
                } else {
                    12
                }
            }
            Instr::LoadSlot { .. } | Instr::StoreSlot { .. } | Instr::StoreTag { .. } => 8,
            Instr::StoreSlotImm { .. } => 12,
            Instr::Alu { b, fault, .. } => 4 + imm(b) + opt(fault),
            Instr::Cvt { fault, .. } => 4 + opt(fault),
            Instr::Cmp { b, .. } => 4 + imm(b),
            Instr::BrCc { b, .. } => 8 + imm(b),
            Instr::Jmp { .. } => 8,
            Instr::BrTable { targets, .. } => 4 + 4 * targets.len() as u32,
            Instr::Call { .. } | Instr::HostCall { .. } => 12,
            Instr::Load { fault, .. } | Instr::Store { fault, .. } => 8 + opt(fault),
            Instr::MemSize { .. } | Instr::MemGrow { .. } => 4,
            Instr::LoadGlobal { .. } | Instr::StoreGlobal { .. } => 8,
            Instr::Trap { .. } => 4,
        }
    }

    pub fn is_move(&self) -> bool {
        matches!(self, Instr::MovRR { .. } | Instr::MovRI { .. })
    }

    pub fn is_spill(&self) -> bool {
        matches!(self, Instr::StoreSlot { .. } | Instr::StoreSlotImm { .. })
    }

    pub fn is_tag_store(&self) -> bool {
        matches!(self, Instr::StoreTag { .. })
    }

    /// Labels referenced by this instruction.
    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        let (one, many): (Option<Label>, &[Label]) = match self {
            Instr::Alu { fault, .. } | Instr::Cvt { fault, .. } | Instr::Load { fault, .. } | Instr::Store { fault, .. } => (*fault, &[]),
            Instr::BrCc { target, .. } | Instr::Jmp { target } => (Some(*target), &[]),
            Instr::BrTable { targets, .. } => (None, targets.as_slice()),
            _ => (None, &[]),
        };
        one.into_iter().chain(many.iter().copied())
    }

    fn write(&self, out: &mut String, pos: &dyn Fn(Label) -> u32) -> fmt::Result {
        let l = |lab: Label| pos(lab);
        let fault = |out: &mut String, f: &Option<Label>| -> fmt::Result {
            if let Some(f) = f {
                write!(out, " !@{:04}", l(*f))?;
            }
            Ok(())
        };
        let w = |w: &Width| w.bits();
        match self {
            Instr::MovRR { dst, src } => write!(out, "mov {dst}, {src}"),
            Instr::MovRI { dst, imm } => {
                if dst.is_float() {
                    write!(out, "mov {dst}, #{imm:#x}")
                } else {
                    write!(out, "mov {dst}, #{}", *imm as i64)
                }
            }
            Instr::LoadSlot { dst, slot } => write!(out, "load.slot {dst}, [vfp+{slot}]"),
            Instr::StoreSlot { src, slot } => write!(out, "store.slot {src}, [vfp+{slot}]"),
            Instr::StoreSlotImm { slot, imm, w: wd } => write!(out, "store.slot{} #{imm}, [vfp+{slot}]", w(wd)),
            Instr::StoreTag { slot, tag } => write!(out, "store.tag #{tag}, [vfp+{slot}]"),
            Instr::Alu { op, w: wd, dst, a, b, fault: f } => {
                write!(out, "{}{} {dst}, {a}, {b}", op.mnemonic(), w(wd))?;
                fault(out, f)
            }
            Instr::FAlu { op, w: wd, dst, a, b } => write!(out, "{}{} {dst}, {a}, {b}", op.mnemonic(), w(wd)),
            Instr::FUn { op, w: wd, dst, a } => write!(out, "{}{} {dst}, {a}", op.mnemonic(), w(wd)),
            Instr::Cvt { op, dst, src, fault: f } => {
                write!(out, "{} {dst}, {src}", op.mnemonic())?;
                fault(out, f)
            }
            Instr::Cmp { w: wd, a, b } => write!(out, "cmp{} {a}, {b}", w(wd)),
            Instr::SetCc { cond, dst } => write!(out, "set.{} {dst}", cond.mnemonic()),
            Instr::BrCc { cond, w: wd, a, b, target } => write!(out, "br.{}{} {a}, {b}, @{:04}", cond.mnemonic(), w(wd), l(*target)),
            Instr::Jmp { target } => write!(out, "jmp @{:04}", l(*target)),
            Instr::BrTable { idx, targets } => {
                write!(out, "br_table {idx}, [")?;
                for (i, t) in targets.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    write!(out, "@{:04}", l(*t))?;
                }
                out.push(']');
                Ok(())
            }
            Instr::Call { func, h } => write!(out, "call f{func}, h={h}"),
            Instr::HostCall { import, h } => write!(out, "hostcall i{import}, h={h}"),
            Instr::Ret => write!(out, "ret"),
            Instr::Load { kind, dst, addr, offset, fault: f } => {
                write!(out, "mem.load.{} {dst}, [{addr}+{offset}]", kind.suffix())?;
                fault(out, f)
            }
            Instr::Store { kind, src, addr, offset, fault: f } => {
                write!(out, "mem.store.{} {src}, [{addr}+{offset}]", kind.suffix())?;
                fault(out, f)
            }
            Instr::MemSize { dst } => write!(out, "mem.size {dst}"),
            Instr::MemGrow { dst, src } => write!(out, "mem.grow {dst}, {src}"),
            Instr::LoadGlobal { dst, idx } => write!(out, "load.global {dst}, g{idx}"),
            Instr::StoreGlobal { src, idx } => write!(out, "store.global {src}, g{idx}"),
            Instr::Trap { kind: Some(k) } => write!(out, "trap {k}"),
            Instr::Trap { kind: None } => write!(out, "trap latched"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FinalizeError {
    UnboundLabel(Label),
    AliasCycle(Label),
}

impl fmt::Display for FinalizeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FinalizeError::UnboundLabel(l) => write!(f, "label {} referenced but never bound", l.0),
            FinalizeError::AliasCycle(l) => write!(f, "label {} aliases itself", l.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LabelState {
    Unbound,
    Bound(u32),
    Alias(Label),
}

/// Instruction sequence under construction.
#[derive(Clone, Debug, Default)]
pub struct CodeBuffer {
    instrs: Vec<Instr>,
    src: Vec<u32>,
    labels: Vec<LabelState>,
    cur_src: u32,
    /// A label is bound at the current end of the buffer.
    bound_at_end: bool,
}

impl CodeBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.instrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instrs.is_empty()
    }

    /// Sets the source pc attached to subsequently emitted instructions.
    /// Never moves backwards, keeping the source map monotonic.
    pub fn set_source(&mut self, pc: u32) {
        self.cur_src = self.cur_src.max(pc);
    }

    pub fn emit(&mut self, i: Instr) {
        self.instrs.push(i);
        self.src.push(self.cur_src);
        self.bound_at_end = false;
    }

    /// Removes a final `jmp l`, which is redundant when `l` is about to be
    /// bound right after it. Does nothing if a label already points past it.
    pub fn drop_trailing_jmp(&mut self, l: Label) -> bool {
        if !self.bound_at_end && self.instrs.last() == Some(&Instr::Jmp { target: l }) {
            self.instrs.pop();
            self.src.pop();
            return true;
        }
        false
    }

    pub fn new_label(&mut self) -> Label {
        self.labels.push(LabelState::Unbound);
        Label(self.labels.len() as u32 - 1)
    }

    /// Binds `l` to the position of the next emitted instruction.
    pub fn bind(&mut self, l: Label) {
        debug_assert_eq!(self.labels[l.0 as usize], LabelState::Unbound, "label bound twice");
        self.labels[l.0 as usize] = LabelState::Bound(self.instrs.len() as u32);
        self.bound_at_end = true;
    }

    /// Makes `l` resolve to wherever `target` is (or will be) bound.
    pub fn alias(&mut self, l: Label, target: Label) {
        debug_assert_eq!(self.labels[l.0 as usize], LabelState::Unbound, "label bound twice");
        self.labels[l.0 as usize] = LabelState::Alias(target);
    }

    pub fn is_bound(&self, l: Label) -> bool {
        self.labels[l.0 as usize] != LabelState::Unbound
    }

    pub fn instrs(&self) -> &[Instr] {
        &self.instrs
    }

    pub fn finalize(self) -> Result<VisaProgram, FinalizeError> {
        let n = self.labels.len();
        let mut pos = alloc::vec![u32::MAX; n];
        for i in 0..n {
            let mut l = Label(i as u32);
            let mut steps = 0;
            pos[i] = loop {
                match self.labels[l.0 as usize] {
                    LabelState::Bound(p) => break p,
                    LabelState::Alias(t) => l = t,
                    // unreferenced labels may stay unbound
                    LabelState::Unbound => break u32::MAX,
                }
                steps += 1;
                if steps > n {
                    return Err(FinalizeError::AliasCycle(Label(i as u32)));
                }
            };
        }
        for ins in &self.instrs {
            for l in ins.labels() {
                if pos[l.0 as usize] == u32::MAX {
                    return Err(FinalizeError::UnboundLabel(l));
                }
            }
        }
        Ok(VisaProgram { instrs: self.instrs, src: self.src, label_pos: pos })
    }
}

/// Finalized, immutable code with resolved labels and its source map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisaProgram {
    pub instrs: Vec<Instr>,
    /// Wasm pc of each instruction.
    pub src: Vec<u32>,
    label_pos: Vec<u32>,
}

impl VisaProgram {
    #[inline]
    pub fn target(&self, l: Label) -> usize {
        self.label_pos[l.0 as usize] as usize
    }

    pub fn code_bytes(&self) -> u64 {
        self.instrs.iter().map(|i| i.encoded_size() as u64).sum()
    }

    /// One line per instruction: `pc: opcode ops ; wasm@off`.
    pub fn disassemble(&self) -> String {
        let mut out = String::new();
        for (pc, ins) in self.instrs.iter().enumerate() {
            let _ = write!(out, "{pc:04}: ");
            let _ = ins.write(&mut out, &|l| self.label_pos[l.0 as usize]);
            let _ = writeln!(out, " ; wasm@{}", self.src[pc]);
        }
        out
    }

    pub fn disassemble_one(&self, pc: usize) -> String {
        let mut out = String::new();
        let _ = self.instrs[pc].write(&mut out, &|l| self.label_pos[l.0 as usize]);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emit_grows_buffer() {
        let mut b = CodeBuffer::new();
        b.emit(Instr::MovRI { dst: Reg::R0, imm: 5 });
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn forward_branch_resolves() {
        let mut b = CodeBuffer::new();
        let l = b.new_label();
        b.emit(Instr::Jmp { target: l });
        b.emit(Instr::Ret);
        b.bind(l);
        b.emit(Instr::Ret);
        let p = b.finalize().unwrap();
        assert_eq!(p.target(l), 2);
        assert!(p.disassemble().starts_with("0000: jmp @0002 ; wasm@0\n"));
    }

    #[test]
    fn alias_follows_target() {
        let mut b = CodeBuffer::new();
        let (a, t) = (b.new_label(), b.new_label());
        b.alias(a, t);
        b.emit(Instr::Jmp { target: a });
        b.bind(t);
        b.emit(Instr::Ret);
        assert_eq!(b.finalize().unwrap().target(a), 1);
    }

    #[test]
    fn unbound_label_fails() {
        let mut b = CodeBuffer::new();
        let l = b.new_label();
        b.emit(Instr::Jmp { target: l });
        assert_eq!(b.finalize().unwrap_err(), FinalizeError::UnboundLabel(l));
    }

    #[test]
    fn disassembly_format() {
        let mut b = CodeBuffer::new();
        b.set_source(2);
        b.emit(Instr::MovRI { dst: Reg::R0, imm: 5 });
        b.emit(Instr::StoreSlot { src: Reg::R0, slot: 3 });
        let text = b.finalize().unwrap().disassemble();
        assert_eq!(text, "0000: mov r0, #5 ; wasm@2\n0001: store.slot r0, [vfp+3] ; wasm@2\n");
        assert_eq!(CodeBuffer::new().finalize().unwrap().disassemble(), "");
    }

    #[test]
    fn source_map_is_monotonic() {
        let mut b = CodeBuffer::new();
        b.set_source(7);
        b.emit(Instr::Ret);
        b.set_source(3);
        b.emit(Instr::Ret);
        let p = b.finalize().unwrap();
        assert_eq!(p.src, [7, 7]);
    }

    #[test]
    fn cost_model() {
        let l = Instr::Load { kind: MemKind::I32, dst: Reg::R0, addr: Reg::R0, offset: 0, fault: None };
        assert_eq!(l.cost(), 2);
        assert_eq!(Instr::Call { func: 0, h: 0 }.cost(), 5);
        assert_eq!(Instr::Ret.cost(), 1);
    }
}
