use alloc::string::ToString;
use alloc::vec::Vec;
use core::fmt;

use super::reader::{ReadError, Reader};
use super::*;

/// Structural violation in the binary encoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeError {
    pub offset: usize,
    pub reason: &'static str,
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "malformed module at offset {}: {}", self.offset, self.reason)
    }
}

impl From<ReadError> for DecodeError {
    fn from(e: ReadError) -> Self {
        DecodeError { offset: e.offset, reason: e.reason }
    }
}

fn fail<T>(offset: usize, reason: &'static str) -> Result<T, DecodeError> {
    Err(DecodeError { offset, reason })
}

// Position of each known section id in the canonical order.
fn section_rank(id: u8) -> Option<u8> {
    Some(match id {
        1 => 1,
        2 => 2,
        3 => 3,
        4 => 4,
        5 => 5,
        6 => 6,
        7 => 7,
        8 => 8,
        9 => 9,
        12 => 10,
        10 => 11,
        11 => 12,
        _ => return None,
    })
}

/// Decodes a binary module. Function bodies are located but not validated.
pub fn decode_module(bytes: &[u8]) -> Result<WasmModule, DecodeError> {
    if bytes.len() < 8 {
        return fail(0, "missing magic header");
    }
    if &bytes[0..4] != b"\0asm" {
        return fail(0, "bad magic number");
    }
    if bytes[4..8] != [1, 0, 0, 0] {
        return fail(4, "unsupported version");
    }
    let mut m = WasmModule { bytes: bytes.to_vec(), ..WasmModule::default() };
    let mut r = Reader::at(bytes, 8);
    let mut last_rank = 0u8;
    let mut func_types: Vec<u32> = Vec::new();
    let mut saw_code = false;

    while !r.is_at_end() {
        let id_off = r.pos();
        let id = r.u8()?;
        let len = r.u32()? as usize;
        let mut s = r.sub(len)?;
        if id != 0 {
            let Some(rank) = section_rank(id) else {
                return fail(id_off, "unknown section id");
            };
            if rank <= last_rank {
                return fail(id_off, "section out of order or duplicated");
            }
            last_rank = rank;
        }
        match id {
            0 => {
                s.name()?;
                // custom section payload is ignored
                s.bytes(s.remaining())?;
            }
            1 => {
                let n = s.u32()?;
                for _ in 0..n {
                    let off = s.pos();
                    if s.u8()? != 0x60 {
                        return fail(off, "expected function type");
                    }
                    let np = s.u32()?;
                    let mut params = Vec::with_capacity(np.min(1024) as usize);
                    for _ in 0..np {
                        params.push(val_type(&mut s)?);
                    }
                    let nr = s.u32()?;
                    if nr > 1 {
                        return fail(off, "multiple results are not supported");
                    }
                    let result = if nr == 1 { Some(val_type(&mut s)?) } else { None };
                    m.types.push(FuncType { params, result });
                }
            }
            2 => {
                let n = s.u32()?;
                for _ in 0..n {
                    let module = s.name()?.to_string();
                    let name = s.name()?.to_string();
                    let off = s.pos();
                    if s.u8()? != 0x00 {
                        return fail(off, "only function imports are supported");
                    }
                    let type_idx = s.u32()?;
                    if type_idx as usize >= m.types.len() {
                        return fail(off, "type index out of bounds");
                    }
                    m.imports.push(Import { module, name, type_idx });
                }
            }
            3 => {
                let n = s.u32()?;
                for _ in 0..n {
                    let off = s.pos();
                    let t = s.u32()?;
                    if t as usize >= m.types.len() {
                        return fail(off, "type index out of bounds");
                    }
                    func_types.push(t);
                }
            }
            4 => return fail(id_off, "tables are not supported"),
            5 => {
                let n = s.u32()?;
                if n > 1 {
                    return fail(id_off, "at most one memory is allowed");
                }
                if n == 1 {
                    let off = s.pos();
                    let flags = s.u8()?;
                    let min = s.u32()?;
                    let max = match flags {
                        0 => None,
                        1 => Some(s.u32()?),
                        _ => return fail(off, "unsupported memory limits flags"),
                    };
                    if min > 65536 || max.is_some_and(|x| x > 65536 || x < min) {
                        return fail(off, "invalid memory limits");
                    }
                    m.memory = Some(MemoryType { min, max });
                }
            }
            6 => {
                let n = s.u32()?;
                for _ in 0..n {
                    let ty = val_type(&mut s)?;
                    let off = s.pos();
                    let mutable = match s.u8()? {
                        0 => false,
                        1 => true,
                        _ => return fail(off, "invalid global mutability"),
                    };
                    let (cty, init) = const_expr(&mut s)?;
                    if cty != ty {
                        return fail(off, "global initializer type mismatch");
                    }
                    m.globals.push(Global { ty, mutable, init });
                }
            }
            7 => {
                let n = s.u32()?;
                for _ in 0..n {
                    let name = s.name()?.to_string();
                    let off = s.pos();
                    let kind = match s.u8()? {
                        0 => ExportKind::Func,
                        2 => ExportKind::Memory,
                        3 => ExportKind::Global,
                        _ => return fail(off, "unsupported export kind"),
                    };
                    let index = s.u32()?;
                    let in_bounds = match kind {
                        ExportKind::Func => (index as usize) < m.imports.len() + func_types.len(),
                        ExportKind::Memory => index == 0 && m.memory.is_some(),
                        ExportKind::Global => (index as usize) < m.globals.len(),
                    };
                    if !in_bounds {
                        return fail(off, "export index out of bounds");
                    }
                    if m.exports.iter().any(|e| e.name == name) {
                        return fail(off, "duplicate export name");
                    }
                    m.exports.push(Export { name, kind, index });
                }
            }
            8 => {
                let off = s.pos();
                let idx = s.u32()?;
                if idx as usize >= m.imports.len() + func_types.len() {
                    return fail(off, "start function index out of bounds");
                }
                m.start = Some(idx);
            }
            9 => return fail(id_off, "element segments are not supported"),
            12 => {
                s.u32()?;
            }
            10 => {
                saw_code = true;
                let n = s.u32()?;
                if n as usize != func_types.len() {
                    return fail(id_off, "function and code section counts differ");
                }
                for &type_idx in &func_types {
                    let size = s.u32()? as usize;
                    let start = s.pos();
                    let mut b = s.sub(size)?;
                    let params = &m.types[type_idx as usize].params;
                    let mut local_types: Vec<ValType> = params.clone();
                    let runs = b.u32()?;
                    let mut locals = Vec::new();
                    for _ in 0..runs {
                        let off = b.pos();
                        let count = b.u32()?;
                        let ty = val_type(&mut b)?;
                        if local_types.len() as u64 + u64::from(count) > u64::from(MAX_LOCALS) {
                            return fail(off, "too many locals");
                        }
                        locals.push((count, ty));
                        local_types.extend(core::iter::repeat_n(ty, count as usize));
                    }
                    let code_offset = (b.pos() - start) as u32;
                    if b.is_at_end() {
                        return fail(b.pos(), "function body missing end");
                    }
                    m.functions.push(WasmFunction {
                        type_idx,
                        locals,
                        body: start..start + size,
                        code_offset,
                        sidetable: Vec::new(),
                        max_stack_height: 0,
                        num_params: params.len() as u32,
                        local_types,
                    });
                }
            }
            11 => {
                let n = s.u32()?;
                for _ in 0..n {
                    let off = s.pos();
                    if s.u32()? != 0 {
                        return fail(off, "only active data segments for memory 0 are supported");
                    }
                    if m.memory.is_none() {
                        return fail(off, "data segment without memory");
                    }
                    let (ty, v) = const_expr(&mut s)?;
                    if ty != ValType::I32 {
                        return fail(off, "data offset must be i32");
                    }
                    let len = s.u32()? as usize;
                    let start = s.pos();
                    s.bytes(len)?;
                    m.data.push(DataSegment { offset: v as u32, range: start..start + len });
                }
            }
            _ => unreachable!(),
        }
        if !s.is_at_end() {
            return fail(s.pos(), "section size mismatch");
        }
    }
    if !saw_code && !func_types.is_empty() {
        return fail(bytes.len(), "function section without code section");
    }
    if let Some(st) = m.start {
        let ty = m.func_type(st).expect("checked above");
        if !ty.params.is_empty() || ty.result.is_some() {
            return fail(bytes.len(), "start function must have type [] -> []");
        }
    }
    Ok(m)
}

fn val_type(r: &mut Reader<'_>) -> Result<ValType, DecodeError> {
    let off = r.pos();
    let b = r.u8()?;
    ValType::from_byte(b).ok_or(DecodeError { offset: off, reason: "unknown value type" })
}

fn const_expr(r: &mut Reader<'_>) -> Result<(ValType, u64), DecodeError> {
    let off = r.pos();
    let v = match r.u8()? {
        opcodes::I32_CONST => (ValType::I32, u64::from(r.i32()? as u32)),
        opcodes::I64_CONST => (ValType::I64, r.i64()? as u64),
        opcodes::F32_CONST => (ValType::F32, u64::from(r.f32_bits()?)),
        opcodes::F64_CONST => (ValType::F64, r.f64_bits()?),
        opcodes::REF_NULL => {
            if r.u8()? != 0x6f {
                return fail(off, "unsupported reference type");
            }
            (ValType::Ref, 0)
        }
        _ => return fail(off, "unsupported constant expression"),
    };
    if r.u8()? != opcodes::END {
        return fail(r.pos(), "constant expression missing end");
    }
    Ok(v)
}

/// Re-serializes a decoded module. Function bodies, data and custom sections
/// are copied from `module.bytes`; custom sections are dropped.
pub fn encode_module(module: &WasmModule) -> Vec<u8> {
    let mut b = builder::ModuleBuilder::from_module(module);
    b.build().expect("a decoded module re-encodes")
}
