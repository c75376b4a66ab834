//! Programmatic construction of binary modules.
//!
//! Used by tests, the benchmark kernels and the differential fuzzer. Function
//! bodies are written as [`Op`] sequences (or raw bytes) and the builder
//! produces a binary that [`decode_module`](super::decode_module) accepts.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use super::opcodes as op;
use super::reader::{write_i64, write_u32, Reader};
use super::*;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BuilderError(pub String);

impl fmt::Display for BuilderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "builder error: {}", self.0)
    }
}

fn err<T>(msg: &str) -> Result<T, BuilderError> {
    Err(BuilderError(msg.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct MemArg {
    pub align: u32,
    pub offset: u32,
}

/// One instruction of the supported subset.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Unreachable,
    Nop,
    Block(Option<ValType>),
    Loop(Option<ValType>),
    If(Option<ValType>),
    Else,
    End,
    Br(u32),
    BrIf(u32),
    BrTable(Vec<u32>, u32),
    Return,
    Call(u32),
    Drop,
    Select,
    LocalGet(u32),
    LocalSet(u32),
    LocalTee(u32),
    GlobalGet(u32),
    GlobalSet(u32),
    /// A load opcode (`i32.load` .. `i32.load8_u`).
    Load(u8, MemArg),
    /// A store opcode (`i32.store` .. `i32.store8`).
    Store(u8, MemArg),
    MemorySize,
    MemoryGrow,
    I32Const(i32),
    I64Const(i64),
    F32Const(u32),
    F64Const(u64),
    RefNull,
    RefIsNull,
    /// Any opcode without immediates (arithmetic, comparisons, conversions).
    Plain(u8),
}

impl Op {
    pub fn f32(v: f32) -> Op {
        Op::F32Const(v.to_bits())
    }

    pub fn f64(v: f64) -> Op {
        Op::F64Const(v.to_bits())
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        let bt = |out: &mut Vec<u8>, t: &Option<ValType>| out.push(t.map_or(0x40, ValType::to_byte));
        match self {
            Op::Unreachable => out.push(op::UNREACHABLE),
            Op::Nop => out.push(op::NOP),
            Op::Block(t) => {
                out.push(op::BLOCK);
                bt(out, t)
            }
            Op::Loop(t) => {
                out.push(op::LOOP);
                bt(out, t)
            }
            Op::If(t) => {
                out.push(op::IF);
                bt(out, t)
            }
            Op::Else => out.push(op::ELSE),
            Op::End => out.push(op::END),
            Op::Br(d) => {
                out.push(op::BR);
                write_u32(out, *d)
            }
            Op::BrIf(d) => {
                out.push(op::BR_IF);
                write_u32(out, *d)
            }
            Op::BrTable(ts, d) => {
                out.push(op::BR_TABLE);
                write_u32(out, ts.len() as u32);
                for t in ts {
                    write_u32(out, *t);
                }
                write_u32(out, *d)
            }
            Op::Return => out.push(op::RETURN),
            Op::Call(f) => {
                out.push(op::CALL);
                write_u32(out, *f)
            }
            Op::Drop => out.push(op::DROP),
            Op::Select => out.push(op::SELECT),
            Op::LocalGet(i) | Op::LocalSet(i) | Op::LocalTee(i) | Op::GlobalGet(i) | Op::GlobalSet(i) => {
                out.push(match self {
                    Op::LocalGet(_) => op::LOCAL_GET,
                    Op::LocalSet(_) => op::LOCAL_SET,
                    Op::LocalTee(_) => op::LOCAL_TEE,
                    Op::GlobalGet(_) => op::GLOBAL_GET,
                    _ => op::GLOBAL_SET,
                });
                write_u32(out, *i)
            }
            Op::Load(o, m) | Op::Store(o, m) => {
                out.push(*o);
                write_u32(out, m.align);
                write_u32(out, m.offset)
            }
            Op::MemorySize => out.extend_from_slice(&[op::MEMORY_SIZE, 0]),
            Op::MemoryGrow => out.extend_from_slice(&[op::MEMORY_GROW, 0]),
            Op::I32Const(v) => {
                out.push(op::I32_CONST);
                write_i64(out, i64::from(*v))
            }
            Op::I64Const(v) => {
                out.push(op::I64_CONST);
                write_i64(out, *v)
            }
            Op::F32Const(b) => {
                out.push(op::F32_CONST);
                out.extend_from_slice(&b.to_le_bytes())
            }
            Op::F64Const(b) => {
                out.push(op::F64_CONST);
                out.extend_from_slice(&b.to_le_bytes())
            }
            Op::RefNull => out.extend_from_slice(&[op::REF_NULL, 0x6f]),
            Op::RefIsNull => out.push(op::REF_IS_NULL),
            Op::Plain(o) => out.push(*o),
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bt = |t: &Option<ValType>| t.map(|t| alloc::format!(" (result {t})")).unwrap_or_default();
        match self {
            Op::Block(t) => write!(f, "block{}", bt(t)),
            Op::Loop(t) => write!(f, "loop{}", bt(t)),
            Op::If(t) => write!(f, "if{}", bt(t)),
            Op::Br(d) => write!(f, "br {d}"),
            Op::BrIf(d) => write!(f, "br_if {d}"),
            Op::BrTable(ts, d) => {
                f.write_str("br_table")?;
                for t in ts {
                    write!(f, " {t}")?;
                }
                write!(f, " {d}")
            }
            Op::Call(i) => write!(f, "call {i}"),
            Op::LocalGet(i) => write!(f, "local.get {i}"),
            Op::LocalSet(i) => write!(f, "local.set {i}"),
            Op::LocalTee(i) => write!(f, "local.tee {i}"),
            Op::GlobalGet(i) => write!(f, "global.get {i}"),
            Op::GlobalSet(i) => write!(f, "global.set {i}"),
            Op::Load(o, m) | Op::Store(o, m) => write!(f, "{} offset={}", op::name(*o).unwrap_or("?"), m.offset),
            Op::I32Const(v) => write!(f, "i32.const {v}"),
            Op::I64Const(v) => write!(f, "i64.const {v}"),
            Op::F32Const(b) => write!(f, "f32.const {:?}", f32::from_bits(*b)),
            Op::F64Const(b) => write!(f, "f64.const {:?}", f64::from_bits(*b)),
            Op::RefNull => f.write_str("ref.null extern"),
            Op::Plain(o) => f.write_str(op::name(*o).unwrap_or("?")),
            other => {
                let mut b = Vec::new();
                other.encode(&mut b);
                f.write_str(op::name(b[0]).unwrap_or("?"))
            }
        }
    }
}

/// Instruction bytes of a function body (without the local declarations).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FuncBody {
    pub code: Vec<u8>,
}

impl FuncBody {
    /// Raw instruction bytes; must include the final `end`.
    pub fn raw(code: &[u8]) -> FuncBody {
        FuncBody { code: code.to_vec() }
    }

    /// Encodes `ops` followed by the function's final `end`.
    pub fn from_ops(ops: &[Op]) -> FuncBody {
        let mut code = Vec::new();
        for o in ops {
            o.encode(&mut code);
        }
        code.push(op::END);
        FuncBody { code }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BuiltFunc {
    pub type_idx: u32,
    pub locals: Vec<(u32, ValType)>,
    pub body: FuncBody,
}

#[derive(Clone, Debug, Default)]
pub struct ModuleBuilder {
    types: Vec<FuncType>,
    imports: Vec<Import>,
    funcs: Vec<BuiltFunc>,
    memory: Option<MemoryType>,
    globals: Vec<Global>,
    exports: Vec<Export>,
    start: Option<u32>,
    data: Vec<(u32, Vec<u8>)>,
    customs: Vec<(String, Vec<u8>)>,
}

impl ModuleBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts from an existing decoded module, keeping its contents editable.
    pub fn from_module(m: &WasmModule) -> Self {
        let funcs = m
            .functions
            .iter()
            .map(|f| {
                let code_start = f.body.start + f.code_offset as usize;
                BuiltFunc {
                    type_idx: f.type_idx,
                    locals: f.locals.clone(),
                    body: FuncBody { code: m.bytes[code_start..f.body.end].to_vec() },
                }
            })
            .collect();
        ModuleBuilder {
            types: m.types.clone(),
            imports: m.imports.clone(),
            funcs,
            memory: m.memory,
            globals: m.globals.clone(),
            exports: m.exports.clone(),
            start: m.start,
            data: m.data.iter().map(|d| (d.offset, m.bytes[d.range.clone()].to_vec())).collect(),
            customs: Vec::new(),
        }
    }

    /// Returns the index of an identical existing type, or adds it.
    pub fn add_type(&mut self, params: &[ValType], result: Option<ValType>) -> u32 {
        let t = FuncType { params: params.to_vec(), result };
        if let Some(i) = self.types.iter().position(|x| *x == t) {
            return i as u32;
        }
        self.types.push(t);
        (self.types.len() - 1) as u32
    }

    /// Adds a function import and returns its function index. Imports must be
    /// added before any defined function.
    pub fn import_func(&mut self, module: &str, name: &str, type_idx: u32) -> u32 {
        self.imports.push(Import { module: module.to_string(), name: name.to_string(), type_idx });
        (self.imports.len() - 1) as u32
    }

    /// Adds a defined function and returns its function index.
    pub fn add_function(&mut self, type_idx: u32, locals: &[(u32, ValType)], body: FuncBody) -> u32 {
        self.funcs.push(BuiltFunc { type_idx, locals: locals.to_vec(), body });
        (self.imports.len() + self.funcs.len() - 1) as u32
    }

    pub fn functions_mut(&mut self) -> &mut [BuiltFunc] {
        &mut self.funcs
    }

    pub fn num_imports(&self) -> u32 {
        self.imports.len() as u32
    }

    pub fn add_memory(&mut self, min: u32, max: Option<u32>) {
        self.memory = Some(MemoryType { min, max });
    }

    pub fn add_global(&mut self, ty: ValType, mutable: bool, init: u64) -> u32 {
        self.globals.push(Global { ty, mutable, init });
        (self.globals.len() - 1) as u32
    }

    pub fn export_func(&mut self, name: &str, func: u32) {
        self.exports.push(Export { name: name.to_string(), kind: ExportKind::Func, index: func });
    }

    pub fn export_memory(&mut self, name: &str) {
        self.exports.push(Export { name: name.to_string(), kind: ExportKind::Memory, index: 0 });
    }

    pub fn export_global(&mut self, name: &str, global: u32) {
        self.exports.push(Export { name: name.to_string(), kind: ExportKind::Global, index: global });
    }

    pub fn exports(&self) -> &[Export] {
        &self.exports
    }

    pub fn set_start(&mut self, func: u32) {
        self.start = Some(func);
    }

    pub fn add_data(&mut self, offset: u32, bytes: &[u8]) {
        self.data.push((offset, bytes.to_vec()));
    }

    pub fn add_custom(&mut self, name: &str, payload: &[u8]) {
        self.customs.push((name.to_string(), payload.to_vec()));
    }

    fn check(&self) -> Result<(), BuilderError> {
        let ntypes = self.types.len() as u32;
        let nfuncs = (self.imports.len() + self.funcs.len()) as u32;
        if self.imports.iter().any(|i| i.type_idx >= ntypes) || self.funcs.iter().any(|f| f.type_idx >= ntypes) {
            return err("function refers to an undeclared type");
        }
        for (i, e) in self.exports.iter().enumerate() {
            if self.exports[..i].iter().any(|x| x.name == e.name) {
                return err("duplicate export name");
            }
            let ok = match e.kind {
                ExportKind::Func => e.index < nfuncs,
                ExportKind::Memory => e.index == 0 && self.memory.is_some(),
                ExportKind::Global => (e.index as usize) < self.globals.len(),
            };
            if !ok {
                return err("export refers to an undeclared item");
            }
        }
        if let Some(s) = self.start {
            if s >= nfuncs {
                return err("start function is not declared");
            }
        }
        if !self.data.is_empty() && self.memory.is_none() {
            return err("data segment without memory");
        }
        Ok(())
    }

    pub fn build(&mut self) -> Result<Vec<u8>, BuilderError> {
        self.check()?;
        let mut out = Vec::from(*b"\0asm\x01\0\0\0");
        let section = |id: u8, payload: Vec<u8>, out: &mut Vec<u8>| {
            out.push(id);
            write_u32(out, payload.len() as u32);
            out.extend_from_slice(&payload);
        };
        if !self.types.is_empty() {
            let mut p = Vec::new();
            write_u32(&mut p, self.types.len() as u32);
            for t in &self.types {
                p.push(0x60);
                write_u32(&mut p, t.params.len() as u32);
                p.extend(t.params.iter().map(|v| v.to_byte()));
                match t.result {
                    Some(r) => p.extend_from_slice(&[1, r.to_byte()]),
                    None => p.push(0),
                }
            }
            section(1, p, &mut out);
        }
        if !self.imports.is_empty() {
            let mut p = Vec::new();
            write_u32(&mut p, self.imports.len() as u32);
            for i in &self.imports {
                write_name(&mut p, &i.module);
                write_name(&mut p, &i.name);
                p.push(0);
                write_u32(&mut p, i.type_idx);
            }
            section(2, p, &mut out);
        }
        if !self.funcs.is_empty() {
            let mut p = Vec::new();
            write_u32(&mut p, self.funcs.len() as u32);
            for f in &self.funcs {
                write_u32(&mut p, f.type_idx);
            }
            section(3, p, &mut out);
        }
        if let Some(m) = self.memory {
            let mut p = vec_with(1);
            match m.max {
                Some(max) => {
                    p.push(1);
                    write_u32(&mut p, m.min);
                    write_u32(&mut p, max);
                }
                None => {
                    p.push(0);
                    write_u32(&mut p, m.min);
                }
            }
            section(5, p, &mut out);
        }
        if !self.globals.is_empty() {
            let mut p = Vec::new();
            write_u32(&mut p, self.globals.len() as u32);
            for g in &self.globals {
                p.push(g.ty.to_byte());
                p.push(g.mutable as u8);
                const_op(g.ty, g.init).encode(&mut p);
                p.push(op::END);
            }
            section(6, p, &mut out);
        }
        if !self.exports.is_empty() {
            let mut p = Vec::new();
            write_u32(&mut p, self.exports.len() as u32);
            for e in &self.exports {
                write_name(&mut p, &e.name);
                p.push(match e.kind {
                    ExportKind::Func => 0,
                    ExportKind::Memory => 2,
                    ExportKind::Global => 3,
                });
                write_u32(&mut p, e.index);
            }
            section(7, p, &mut out);
        }
        if let Some(s) = self.start {
            let mut p = Vec::new();
            write_u32(&mut p, s);
            section(8, p, &mut out);
        }
        if !self.funcs.is_empty() {
            let mut p = Vec::new();
            write_u32(&mut p, self.funcs.len() as u32);
            for f in &self.funcs {
                let mut body = Vec::new();
                write_u32(&mut body, f.locals.len() as u32);
                for (n, t) in &f.locals {
                    write_u32(&mut body, *n);
                    body.push(t.to_byte());
                }
                body.extend_from_slice(&f.body.code);
                write_u32(&mut p, body.len() as u32);
                p.extend_from_slice(&body);
            }
            section(10, p, &mut out);
        }
        if !self.data.is_empty() {
            let mut p = Vec::new();
            write_u32(&mut p, self.data.len() as u32);
            for (off, bytes) in &self.data {
                p.push(0);
                Op::I32Const(*off as i32).encode(&mut p);
                p.push(op::END);
                write_u32(&mut p, bytes.len() as u32);
                p.extend_from_slice(bytes);
            }
            section(11, p, &mut out);
        }
        for (name, payload) in &self.customs {
            let mut p = Vec::new();
            write_name(&mut p, name);
            p.extend_from_slice(payload);
            section(0, p, &mut out);
        }
        Ok(out)
    }
}

fn vec_with(n: u32) -> Vec<u8> {
    let mut v = Vec::new();
    write_u32(&mut v, n);
    v
}

fn write_name(out: &mut Vec<u8>, s: &str) {
    write_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

/// The constant instruction producing raw slot bits `bits` of type `ty`.
pub fn const_op(ty: ValType, bits: u64) -> Op {
    match ty {
        ValType::I32 => Op::I32Const(bits as u32 as i32),
        ValType::I64 => Op::I64Const(bits as i64),
        ValType::F32 => Op::F32Const(bits as u32),
        ValType::F64 => Op::F64Const(bits),
        ValType::Ref => Op::RefNull,
    }
}

/// The smallest runnable module: one exported function that returns
/// immediately, plus a name section, 104 bytes in total.
pub fn m_nop() -> Vec<u8> {
    const TARGET: usize = 104;
    let base = {
        let mut b = nop_builder();
        b.build().expect("valid")
    };
    // name section: module-name and function-name subsections
    let fixed = 2 + 5 + 3 + 2 + 9;
    let pad = TARGET - base.len() - fixed;
    let mut module_name = String::from("m_nop");
    while module_name.len() < pad {
        module_name.push('_');
    }
    let mut payload = Vec::new();
    let mut sub = Vec::new();
    write_name(&mut sub, &module_name);
    payload.push(0);
    write_u32(&mut payload, sub.len() as u32);
    payload.extend_from_slice(&sub);
    let mut sub = Vec::new();
    write_u32(&mut sub, 1);
    write_u32(&mut sub, 0);
    write_name(&mut sub, "_start");
    payload.push(1);
    write_u32(&mut payload, sub.len() as u32);
    payload.extend_from_slice(&sub);
    let mut b = nop_builder();
    b.add_custom("name", &payload);
    let bytes = b.build().expect("valid");
    debug_assert_eq!(bytes.len(), TARGET);
    bytes
}

fn nop_builder() -> ModuleBuilder {
    let mut b = ModuleBuilder::new();
    let t = b.add_type(&[], None);
    let f = b.add_function(t, &[], FuncBody::from_ops(&[]));
    b.export_func("_start", f);
    b
}

/// Splits raw instruction bytes into [`Op`]s. Stops after the final `end`.
pub fn parse_ops(code: &[u8]) -> Option<Vec<Op>> {
    let mut r = Reader::new(code);
    let mut ops = Vec::new();
    let mut depth = 0u32;
    while !r.is_at_end() {
        let o = read_op(&mut r)?;
        match o {
            Op::Block(_) | Op::Loop(_) | Op::If(_) => depth += 1,
            Op::End if depth == 0 => return Some(ops),
            Op::End => depth -= 1,
            _ => {}
        }
        ops.push(o);
    }
    None
}

/// Decodes one instruction with its immediates.
pub fn read_op(r: &mut Reader<'_>) -> Option<Op> {
    let opc = r.u8().ok()?;
    let bt = |r: &mut Reader<'_>| -> Option<Option<ValType>> {
        let b = r.u8().ok()?;
        if b == 0x40 {
            Some(None)
        } else {
            ValType::from_byte(b).map(Some)
        }
    };
    let memarg = |r: &mut Reader<'_>| -> Option<MemArg> { Some(MemArg { align: r.u32().ok()?, offset: r.u32().ok()? }) };
    Some(match opc {
        op::UNREACHABLE => Op::Unreachable,
        op::NOP => Op::Nop,
        op::BLOCK => Op::Block(bt(r)?),
        op::LOOP => Op::Loop(bt(r)?),
        op::IF => Op::If(bt(r)?),
        op::ELSE => Op::Else,
        op::END => Op::End,
        op::BR => Op::Br(r.u32().ok()?),
        op::BR_IF => Op::BrIf(r.u32().ok()?),
        op::BR_TABLE => {
            let n = r.u32().ok()?;
            let mut ts = Vec::with_capacity(n.min(1024) as usize);
            for _ in 0..n {
                ts.push(r.u32().ok()?);
            }
            Op::BrTable(ts, r.u32().ok()?)
        }
        op::RETURN => Op::Return,
        op::CALL => Op::Call(r.u32().ok()?),
        op::DROP => Op::Drop,
        op::SELECT => Op::Select,
        op::LOCAL_GET => Op::LocalGet(r.u32().ok()?),
        op::LOCAL_SET => Op::LocalSet(r.u32().ok()?),
        op::LOCAL_TEE => Op::LocalTee(r.u32().ok()?),
        op::GLOBAL_GET => Op::GlobalGet(r.u32().ok()?),
        op::GLOBAL_SET => Op::GlobalSet(r.u32().ok()?),
        op::I32_LOAD | op::I64_LOAD | op::F32_LOAD | op::F64_LOAD | op::I32_LOAD8_U => Op::Load(opc, memarg(r)?),
        op::I32_STORE | op::I64_STORE | op::F32_STORE | op::F64_STORE | op::I32_STORE8 => Op::Store(opc, memarg(r)?),
        op::MEMORY_SIZE => {
            r.u8().ok()?;
            Op::MemorySize
        }
        op::MEMORY_GROW => {
            r.u8().ok()?;
            Op::MemoryGrow
        }
        op::I32_CONST => Op::I32Const(r.i32().ok()?),
        op::I64_CONST => Op::I64Const(r.i64().ok()?),
        op::F32_CONST => Op::F32Const(r.f32_bits().ok()?),
        op::F64_CONST => Op::F64Const(r.f64_bits().ok()?),
        op::REF_NULL => {
            r.u8().ok()?;
            Op::RefNull
        }
        op::REF_IS_NULL => Op::RefIsNull,
        other => {
            op::name(other)?;
            Op::Plain(other)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_type_is_rejected() {
        let mut b = ModuleBuilder::new();
        b.add_function(3, &[], FuncBody::from_ops(&[]));
        assert!(b.build().is_err());
    }

    #[test]
    fn export_of_missing_function_is_rejected() {
        let mut b = ModuleBuilder::new();
        b.export_func("f", 0);
        assert!(b.build().is_err());
    }

    #[test]
    fn parse_ops_inverts_encoding() {
        let ops = alloc::vec![
            Op::Block(Some(ValType::I32)),
            Op::I32Const(-5),
            Op::BrTable(alloc::vec![0, 0], 0),
            Op::End,
            Op::Load(op::I64_LOAD, MemArg { align: 3, offset: 8 }),
            Op::f64(1.5),
            Op::Plain(op::F64_ADD),
            Op::RefNull,
        ];
        let body = FuncBody::from_ops(&ops);
        assert_eq!(parse_ops(&body.code).unwrap(), ops);
    }
}
