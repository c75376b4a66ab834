//! Single forward pass over each body: type checking, maximum stack height and
//! sidetable construction.

use alloc::vec::Vec;
use core::fmt;

use super::opcodes as op;
use super::reader::{ReadError, Reader};
use super::*;
use ValType::*;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidationError {
    /// Function index (imports included).
    pub func: u32,
    /// Offset relative to the start of the function body.
    pub pc: u32,
    pub reason: &'static str,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid function {} at pc {}: {}", self.func, self.pc, self.reason)
    }
}

/// Operand and result types of immediate-free numeric instructions.
pub(crate) fn plain_sig(opc: u8) -> Option<(&'static [ValType], ValType)> {
    const I_I: &[ValType] = &[I32];
    const II_I: &[ValType] = &[I32, I32];
    const L_: &[ValType] = &[I64];
    const LL: &[ValType] = &[I64, I64];
    const F_: &[ValType] = &[F32];
    const FF: &[ValType] = &[F32, F32];
    const D_: &[ValType] = &[F64];
    const DD: &[ValType] = &[F64, F64];
    Some(match opc {
        op::I32_EQZ => (I_I, I32),
        op::I32_EQ..=op::I32_GE_U => (II_I, I32),
        op::I64_EQZ => (L_, I32),
        op::I64_EQ..=op::I64_GE_U => (LL, I32),
        op::F32_EQ..=op::F32_GE => (FF, I32),
        op::F64_EQ..=op::F64_GE => (DD, I32),
        op::I32_ADD..=op::I32_SHR_U => (II_I, I32),
        op::I64_ADD..=op::I64_SHR_U => (LL, I64),
        op::F32_ABS | op::F32_NEG | op::F32_SQRT => (F_, F32),
        op::F32_ADD..=op::F32_DIV => (FF, F32),
        op::F64_ABS | op::F64_NEG | op::F64_SQRT => (D_, F64),
        op::F64_ADD..=op::F64_DIV => (DD, F64),
        op::I32_WRAP_I64 => (L_, I32),
        op::I32_TRUNC_F64_S => (D_, I32),
        op::I64_EXTEND_I32_S | op::I64_EXTEND_I32_U => (I_I, I64),
        op::F64_CONVERT_I32_S => (I_I, F64),
        _ => return None,
    })
}

/// Access width in bytes and value type of a load or store opcode.
pub(crate) fn mem_access(opc: u8) -> Option<(u32, ValType)> {
    Some(match opc {
        op::I32_LOAD | op::I32_STORE => (4, I32),
        op::I64_LOAD | op::I64_STORE => (8, I64),
        op::F32_LOAD | op::F32_STORE => (4, F32),
        op::F64_LOAD | op::F64_STORE => (8, F64),
        op::I32_LOAD8_U | op::I32_STORE8 => (1, I32),
        _ => return None,
    })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Func,
    Block,
    Loop,
    If,
    Else,
}

struct Ctrl {
    kind: Kind,
    result: Option<ValType>,
    height: usize,
    unreachable: bool,
    /// Loop body start and the sidetable length there.
    loop_pc: u32,
    loop_stp: u32,
    /// Forward branch entries awaiting this construct's end.
    pending: Vec<usize>,
    /// The `if` false-edge entry, patched at `else` or `end`.
    if_entry: Option<usize>,
}

impl Ctrl {
    fn label_arity(&self) -> u32 {
        if self.kind == Kind::Loop {
            0
        } else {
            self.result.is_some() as u32
        }
    }

    fn label_type(&self) -> Option<ValType> {
        if self.kind == Kind::Loop {
            None
        } else {
            self.result
        }
    }
}

struct Validator<'a> {
    m: &'a WasmModule,
    func_idx: u32,
    /// `None` stands for an unknown type in unreachable code.
    stack: Vec<Option<ValType>>,
    ctrl: Vec<Ctrl>,
    table: Vec<SidetableEntry>,
    max_height: usize,
    pc: u32,
    body_start: usize,
}

type VResult<T> = Result<T, ValidationError>;

impl<'a> Validator<'a> {
    fn err<T>(&self, reason: &'static str) -> VResult<T> {
        Err(ValidationError { func: self.func_idx, pc: self.pc, reason })
    }

    fn rd(&self, e: ReadError) -> ValidationError {
        ValidationError { func: self.func_idx, pc: (e.offset - self.body_start) as u32, reason: e.reason }
    }

    fn push(&mut self, t: Option<ValType>) {
        self.stack.push(t);
        self.max_height = self.max_height.max(self.stack.len());
    }

    fn pop(&mut self) -> VResult<Option<ValType>> {
        let c = self.ctrl.last().expect("control stack");
        if self.stack.len() == c.height {
            if c.unreachable {
                return Ok(None);
            }
            return self.err("stack underflow");
        }
        Ok(self.stack.pop().expect("nonempty"))
    }

    fn pop_expect(&mut self, want: ValType) -> VResult<Option<ValType>> {
        match self.pop()? {
            Some(t) if t != want => self.err("type mismatch"),
            t => Ok(t.or(Some(want))),
        }
    }

    fn set_unreachable(&mut self) {
        let c = self.ctrl.last_mut().expect("control stack");
        self.stack.truncate(c.height);
        c.unreachable = true;
    }

    fn label(&self, depth: u32) -> VResult<usize> {
        if depth as usize >= self.ctrl.len() {
            return self.err("unbound label");
        }
        Ok(self.ctrl.len() - 1 - depth as usize)
    }

    /// Checks the label's operands are on the stack without consuming them.
    fn check_label_operands(&mut self, target: usize) -> VResult<()> {
        if let Some(t) = self.ctrl[target].label_type() {
            let v = self.pop_expect(t)?;
            self.push(v);
        }
        Ok(())
    }

    /// Records a branch from the current pc to the label at `target`.
    fn add_branch(&mut self, target: usize) {
        let c = &self.ctrl[target];
        let val_count = c.label_arity();
        let pop_count = (self.stack.len().saturating_sub(c.height) as u32).saturating_sub(val_count);
        let (target_pc, target_stp) = if c.kind == Kind::Loop { (c.loop_pc, c.loop_stp) } else { (0, 0) };
        self.table.push(SidetableEntry { branch_pc: self.pc, target_pc, val_count, pop_count, target_stp });
        if c.kind != Kind::Loop {
            let idx = self.table.len() - 1;
            self.ctrl[target].pending.push(idx);
        }
    }

    fn block_type(&self, r: &mut Reader<'_>) -> VResult<Option<ValType>> {
        let b = r.u8().map_err(|e| self.rd(e))?;
        if b == 0x40 {
            return Ok(None);
        }
        match ValType::from_byte(b) {
            Some(t) => Ok(Some(t)),
            None => self.err("unsupported block type"),
        }
    }

    fn push_ctrl(&mut self, kind: Kind, result: Option<ValType>, r: &Reader<'_>) {
        let loop_pc = (r.pos() - self.body_start) as u32;
        let loop_stp = self.table.len() as u32;
        self.ctrl.push(Ctrl {
            kind,
            result,
            height: self.stack.len(),
            unreachable: false,
            loop_pc,
            loop_stp,
            pending: Vec::new(),
            if_entry: None,
        });
    }

    /// Checks the construct's result at `end` or `else`.
    fn check_frame_end(&mut self) -> VResult<()> {
        let (result, height) = {
            let c = self.ctrl.last().expect("control stack");
            (c.result, c.height)
        };
        if let Some(t) = result {
            self.pop_expect(t)?;
        }
        if self.stack.len() != height {
            return self.err("values remaining on stack at end of block");
        }
        Ok(())
    }

    fn need_memory(&self) -> VResult<()> {
        if self.m.memory.is_none() {
            return self.err("memory instruction without memory");
        }
        Ok(())
    }

    fn run(&mut self, f: &WasmFunction, ty: &FuncType) -> VResult<()> {
        let bytes = &self.m.bytes[..f.body.end];
        let code_start = f.body.start + f.code_offset as usize;
        let mut r = Reader::at(bytes, code_start);
        self.ctrl.push(Ctrl {
            kind: Kind::Func,
            result: ty.result,
            height: 0,
            unreachable: false,
            loop_pc: 0,
            loop_stp: 0,
            pending: Vec::new(),
            if_entry: None,
        });
        let locals = &f.local_types;
        while !self.ctrl.is_empty() {
            if r.is_at_end() {
                self.pc = (r.pos() - self.body_start) as u32;
                return self.err("function body missing end");
            }
            self.pc = (r.pos() - self.body_start) as u32;
            let opc = r.u8().map_err(|e| self.rd(e))?;
            macro_rules! imm_u32 {
                () => {
                    r.u32().map_err(|e| self.rd(e))?
                };
            }
            match opc {
                op::UNREACHABLE => self.set_unreachable(),
                op::NOP => {}
                op::BLOCK | op::LOOP => {
                    let bt = self.block_type(&mut r)?;
                    self.push_ctrl(if opc == op::BLOCK { Kind::Block } else { Kind::Loop }, bt, &r);
                }
                op::IF => {
                    let bt = self.block_type(&mut r)?;
                    self.pop_expect(I32)?;
                    self.table.push(SidetableEntry { branch_pc: self.pc, target_pc: 0, val_count: 0, pop_count: 0, target_stp: 0 });
                    let idx = self.table.len() - 1;
                    self.push_ctrl(Kind::If, bt, &r);
                    self.ctrl.last_mut().expect("if").if_entry = Some(idx);
                }
                op::ELSE => {
                    if self.ctrl.last().map(|c| c.kind) != Some(Kind::If) {
                        return self.err("else without matching if");
                    }
                    self.check_frame_end()?;
                    // the then-arm jumps over the else-arm
                    let top = self.ctrl.len() - 1;
                    self.add_branch(top);
                    let here = (r.pos() - self.body_start) as u32;
                    let stp = self.table.len() as u32;
                    let c = self.ctrl.last_mut().expect("if");
                    let e = c.if_entry.take().expect("if entry");
                    self.table[e].target_pc = here;
                    self.table[e].target_stp = stp;
                    c.kind = Kind::Else;
                    c.unreachable = false;
                }
                op::END => {
                    self.check_frame_end()?;
                    let c = self.ctrl.pop().expect("control stack");
                    if c.kind == Kind::If && c.result.is_some() {
                        return self.err("if with result requires else");
                    }
                    let here = (r.pos() - self.body_start) as u32;
                    let stp = self.table.len() as u32;
                    for i in c.pending.into_iter().chain(c.if_entry) {
                        self.table[i].target_pc = here;
                        self.table[i].target_stp = stp;
                    }
                    if let Some(t) = c.result {
                        self.push(Some(t));
                    }
                }
                op::BR => {
                    let d = imm_u32!();
                    let t = self.label(d)?;
                    self.check_label_operands(t)?;
                    self.add_branch(t);
                    self.set_unreachable();
                }
                op::BR_IF => {
                    let d = imm_u32!();
                    let t = self.label(d)?;
                    self.pop_expect(I32)?;
                    self.check_label_operands(t)?;
                    self.add_branch(t);
                }
                op::BR_TABLE => {
                    let n = imm_u32!();
                    if n > 65536 {
                        return self.err("br_table too large");
                    }
                    let mut targets = Vec::with_capacity(n as usize + 1);
                    for _ in 0..=n {
                        let d = imm_u32!();
                        targets.push(self.label(d)?);
                    }
                    self.pop_expect(I32)?;
                    let arity = self.ctrl[targets[n as usize]].label_type();
                    for &t in &targets {
                        if self.ctrl[t].label_type() != arity {
                            return self.err("br_table target arity mismatch");
                        }
                        self.check_label_operands(t)?;
                        self.add_branch(t);
                    }
                    self.set_unreachable();
                }
                op::RETURN => {
                    self.check_label_operands(0)?;
                    self.set_unreachable();
                }
                op::CALL => {
                    let fi = imm_u32!();
                    let Some(ft) = self.m.func_type(fi) else {
                        return self.err("call to unknown function");
                    };
                    for &p in ft.params.iter().rev() {
                        self.pop_expect(p)?;
                    }
                    if let Some(res) = ft.result {
                        self.push(Some(res));
                    }
                }
                op::DROP => {
                    self.pop()?;
                }
                op::SELECT => {
                    self.pop_expect(I32)?;
                    let a = self.pop()?;
                    let b = self.pop()?;
                    let t = match (a, b) {
                        (Some(x), Some(y)) if x != y => return self.err("type mismatch"),
                        (Some(x), _) | (_, Some(x)) => Some(x),
                        _ => None,
                    };
                    if t == Some(Ref) {
                        return self.err("untyped select on references");
                    }
                    self.push(t);
                }
                op::LOCAL_GET | op::LOCAL_SET | op::LOCAL_TEE => {
                    let i = imm_u32!();
                    let Some(&t) = locals.get(i as usize) else {
                        return self.err("local index out of bounds");
                    };
                    if opc != op::LOCAL_GET {
                        self.pop_expect(t)?;
                    }
                    if opc != op::LOCAL_SET {
                        self.push(Some(t));
                    }
                }
                op::GLOBAL_GET | op::GLOBAL_SET => {
                    let i = imm_u32!();
                    let Some(g) = self.m.globals.get(i as usize) else {
                        return self.err("global index out of bounds");
                    };
                    let (t, mutable) = (g.ty, g.mutable);
                    if opc == op::GLOBAL_GET {
                        self.push(Some(t));
                    } else {
                        if !mutable {
                            return self.err("global is immutable");
                        }
                        self.pop_expect(t)?;
                    }
                }
                op::I32_LOAD..=op::F64_LOAD | op::I32_LOAD8_U | op::I32_STORE..=op::I32_STORE8 => {
                    let Some((width, t)) = mem_access(opc) else {
                        return self.err("unsupported opcode");
                    };
                    self.need_memory()?;
                    let align = imm_u32!();
                    let _offset = imm_u32!();
                    if align >= 32 || (1u32 << align) > width {
                        return self.err("alignment must not be larger than natural");
                    }
                    if opc >= op::I32_STORE {
                        self.pop_expect(t)?;
                        self.pop_expect(I32)?;
                    } else {
                        self.pop_expect(I32)?;
                        self.push(Some(t));
                    }
                }
                op::MEMORY_SIZE | op::MEMORY_GROW => {
                    self.need_memory()?;
                    if r.u8().map_err(|e| self.rd(e))? != 0 {
                        return self.err("memory index must be zero");
                    }
                    if opc == op::MEMORY_GROW {
                        self.pop_expect(I32)?;
                    }
                    self.push(Some(I32));
                }
                op::I32_CONST => {
                    r.i32().map_err(|e| self.rd(e))?;
                    self.push(Some(I32));
                }
                op::I64_CONST => {
                    r.i64().map_err(|e| self.rd(e))?;
                    self.push(Some(I64));
                }
                op::F32_CONST => {
                    r.f32_bits().map_err(|e| self.rd(e))?;
                    self.push(Some(F32));
                }
                op::F64_CONST => {
                    r.f64_bits().map_err(|e| self.rd(e))?;
                    self.push(Some(F64));
                }
                op::REF_NULL => {
                    if r.u8().map_err(|e| self.rd(e))? != 0x6f {
                        return self.err("unsupported reference type");
                    }
                    self.push(Some(Ref));
                }
                op::REF_IS_NULL => {
                    self.pop_expect(Ref)?;
                    self.push(Some(I32));
                }
                _ => {
                    let Some((params, res)) = plain_sig(opc) else {
                        return self.err("unsupported opcode");
                    };
                    for &p in params.iter().rev() {
                        self.pop_expect(p)?;
                    }
                    self.push(Some(res));
                }
            }
        }
        if !r.is_at_end() {
            self.pc = (r.pos() - self.body_start) as u32;
            return self.err("trailing bytes after function end");
        }
        debug_assert_eq!(r.consumed(), f.body.end - code_start, "each body byte is read exactly once");
        Ok(())
    }
}

/// Validates every function body and returns the functions with sidetables
/// and maximum stack heights filled in.
pub fn validate(m: &WasmModule) -> Result<Vec<WasmFunction>, ValidationError> {
    let mut out = Vec::with_capacity(m.functions.len());
    for (i, f) in m.functions.iter().enumerate() {
        let func_idx = (m.imports.len() + i) as u32;
        let Some(ty) = m.types.get(f.type_idx as usize) else {
            return Err(ValidationError { func: func_idx, pc: 0, reason: "type index out of bounds" });
        };
        let mut v = Validator {
            m,
            func_idx,
            stack: Vec::new(),
            ctrl: Vec::new(),
            table: Vec::new(),
            max_height: 0,
            pc: 0,
            body_start: f.body.start,
        };
        v.run(f, ty)?;
        let mut f = f.clone();
        f.sidetable = v.table;
        f.max_stack_height = v.max_height as u32;
        out.push(f);
    }
    if let Some(s) = m.start {
        if m.func_type(s).is_none_or(|t| !t.params.is_empty() || t.result.is_some()) {
            return Err(ValidationError { func: s, pc: 0, reason: "start function must have type [] -> []" });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wasm::builder::{FuncBody, ModuleBuilder, Op};
    use alloc::vec;

    fn one(params: &[ValType], result: Option<ValType>, locals: &[(u32, ValType)], code: &[u8]) -> Result<WasmModule, LoadError> {
        let mut b = ModuleBuilder::new();
        let t = b.add_type(params, result);
        b.add_memory(1, None);
        b.add_function(t, locals, FuncBody::raw(code));
        WasmModule::load(&b.build().unwrap())
    }

    #[test]
    fn const_drop_has_height_one() {
        let m = one(&[], None, &[], &[op::I32_CONST, 1, op::DROP, op::END]).unwrap();
        assert_eq!(m.functions[0].max_stack_height, 1);
        assert!(m.functions[0].sidetable.is_empty());
    }

    #[test]
    fn drop_on_empty_stack_underflows() {
        let e = one(&[], None, &[], &[op::DROP, op::END]).unwrap_err();
        match e {
            LoadError::Invalid(v) => {
                assert_eq!(v.reason, "stack underflow");
                assert_eq!(v.pc, 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn block_br_targets_after_block_end() {
        // pcs: 0 local count, 1 block, 2 blocktype, 3 br, 4 depth, 5 end, 6 end
        let m = one(&[], None, &[], &[op::BLOCK, 0x40, op::BR, 0, op::END, op::END]).unwrap();
        let st = &m.functions[0].sidetable;
        assert_eq!(st.len(), 1);
        assert_eq!(st[0], SidetableEntry { branch_pc: 3, target_pc: 6, val_count: 0, pop_count: 0, target_stp: 1 });
    }

    #[test]
    fn loop_branch_targets_body_start() {
        let code = FuncBody::from_ops(&[Op::Loop(None), Op::I32Const(0), Op::BrIf(0), Op::End]);
        let m = one(&[], None, &[], &code.code).unwrap();
        let st = &m.functions[0].sidetable;
        assert_eq!(st[0].target_pc, 3);
        assert_eq!(st[0].target_stp, 0);
    }

    #[test]
    fn if_else_entries() {
        let code = FuncBody::from_ops(&[
            Op::LocalGet(0),
            Op::If(Some(I32)),
            Op::I32Const(1),
            Op::Else,
            Op::I32Const(2),
            Op::End,
            Op::Drop,
        ]);
        let m = one(&[I32], None, &[], &code.code).unwrap();
        let st = &m.functions[0].sidetable;
        // 0 count, 1 local.get 0, 3 if i32, 5 i32.const 1, 7 else, 8 i32.const 2, 10 end, 11 drop
        assert_eq!(st.len(), 2);
        assert_eq!((st[0].branch_pc, st[0].target_pc, st[0].target_stp), (3, 8, 2));
        assert_eq!((st[1].branch_pc, st[1].target_pc, st[1].val_count), (7, 11, 1));
    }

    #[test]
    fn branch_carries_and_pops() {
        let code = FuncBody::from_ops(&[
            Op::Block(Some(I64)),
            Op::I32Const(9),
            Op::I64Const(1),
            Op::Br(0),
            Op::End,
            Op::Drop,
        ]);
        let m = one(&[], None, &[], &code.code).unwrap();
        let e = m.functions[0].sidetable[0];
        assert_eq!((e.val_count, e.pop_count), (1, 1));
    }

    #[test]
    fn br_table_has_one_entry_per_target() {
        let code = FuncBody::from_ops(&[
            Op::Block(None),
            Op::Block(None),
            Op::LocalGet(0),
            Op::BrTable(vec![0, 1], 1),
            Op::End,
            Op::End,
        ]);
        let m = one(&[I32], None, &[], &code.code).unwrap();
        assert_eq!(m.functions[0].sidetable.len(), 3);
    }

    #[test]
    fn rejects_bad_programs() {
        let cases: &[(&[u8], &str)] = &[
            (&[op::BR, 1, op::END], "unbound label"),
            (&[op::I64_CONST, 1, op::I32_EQZ, op::DROP, op::END], "type mismatch"),
            (&[op::BLOCK, 0x40, op::END], "function body missing end"),
            (&[op::I32_CONST, 1, op::END], "values remaining on stack at end of block"),
            (&[op::ELSE, op::END], "else without matching if"),
            (&[op::I32_CONST, 0, op::IF, 0x7f, op::I32_CONST, 1, op::END, op::DROP, op::END], "if with result requires else"),
            (&[op::END, op::NOP], "trailing bytes after function end"),
            (&[0xfc, op::END], "unsupported opcode"),
        ];
        for (code, reason) in cases {
            match one(&[], None, &[], code) {
                Err(LoadError::Invalid(e)) => assert_eq!(e.reason, *reason, "{code:?}"),
                other => panic!("{code:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn unreachable_code_is_polymorphic() {
        let code = FuncBody::from_ops(&[Op::Unreachable, Op::Plain(op::I32_ADD)]);
        assert!(one(&[], Some(I32), &[], &code.code).is_ok());
        let code = FuncBody::from_ops(&[Op::Return, Op::Plain(op::F64_ADD)]);
        assert!(matches!(one(&[], Some(I32), &[], &code.code), Err(LoadError::Invalid(_))));
    }
}
