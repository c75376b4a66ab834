//! Decoding, validation and construction of the supported WebAssembly subset.

pub mod builder;
mod decode;
pub mod opcodes;
pub mod reader;
mod validate;

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

pub use decode::{decode_module, encode_module, DecodeError};
pub use validate::{validate, ValidationError};
pub(crate) use validate::mem_access;
#[cfg(test)]
pub(crate) use validate::plain_sig;

/// Size of one linear-memory page in bytes.
pub const PAGE_SIZE: usize = 65536;
/// Upper bound on pages for memories that declare no maximum.
pub const MAX_PAGES: u32 = 1024;
/// Upper bound on the number of locals (parameters included) per function.
pub const MAX_LOCALS: u32 = 50_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ValType {
    I32,
    I64,
    F32,
    F64,
    /// Nullable opaque host reference (`externref`).
    Ref,
}

impl ValType {
    pub fn from_byte(b: u8) -> Option<ValType> {
        Some(match b {
            0x7f => ValType::I32,
            0x7e => ValType::I64,
            0x7d => ValType::F32,
            0x7c => ValType::F64,
            0x6f => ValType::Ref,
            _ => return None,
        })
    }

    pub fn to_byte(self) -> u8 {
        match self {
            ValType::I32 => 0x7f,
            ValType::I64 => 0x7e,
            ValType::F32 => 0x7d,
            ValType::F64 => 0x7c,
            ValType::Ref => 0x6f,
        }
    }

    /// The value-tag byte stored alongside a slot of this type.
    pub fn tag(self) -> u8 {
        match self {
            ValType::I32 => 0x01,
            ValType::I64 => 0x02,
            ValType::F32 => 0x03,
            ValType::F64 => 0x04,
            ValType::Ref => 0x05,
        }
    }

    pub fn from_tag(tag: u8) -> Option<ValType> {
        Some(match tag {
            0x01 => ValType::I32,
            0x02 => ValType::I64,
            0x03 => ValType::F32,
            0x04 => ValType::F64,
            0x05 => ValType::Ref,
            _ => return None,
        })
    }

    pub fn is_float(self) -> bool {
        matches!(self, ValType::F32 | ValType::F64)
    }

    pub fn name(self) -> &'static str {
        match self {
            ValType::I32 => "i32",
            ValType::I64 => "i64",
            ValType::F32 => "f32",
            ValType::F64 => "f64",
            ValType::Ref => "externref",
        }
    }
}

impl fmt::Display for ValType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FuncType {
    pub params: Vec<ValType>,
    pub result: Option<ValType>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Import {
    pub module: String,
    pub name: String,
    pub type_idx: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Global {
    pub ty: ValType,
    pub mutable: bool,
    /// Raw slot bits of the constant initializer.
    pub init: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryType {
    pub min: u32,
    pub max: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportKind {
    Func,
    Memory,
    Global,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Export {
    pub name: String,
    pub kind: ExportKind,
    pub index: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataSegment {
    pub offset: u32,
    /// Byte range of the segment contents within the module bytes.
    pub range: Range<usize>,
}

/// One branch site's precomputed control transfer.
///
/// Branch sites are `br`, `br_if`, `if` (its false edge), `else` (end of the
/// then-arm) and each target of `br_table`. Entries are ordered by
/// `branch_pc`, so an interpreter can walk them with a single index (the STP).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SidetableEntry {
    pub branch_pc: u32,
    pub target_pc: u32,
    /// Values carried to the target.
    pub val_count: u32,
    /// Values discarded beneath the carried ones.
    pub pop_count: u32,
    /// Sidetable index to resume from once at `target_pc`.
    pub target_stp: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WasmFunction {
    pub type_idx: u32,
    /// Declared local runs, parameters excluded.
    pub locals: Vec<(u32, ValType)>,
    /// Body bytes in the module: local declarations through the final `end`.
    /// All pcs are offsets relative to `body.start`.
    pub body: Range<usize>,
    /// Offset of the first instruction.
    pub code_offset: u32,
    pub sidetable: Vec<SidetableEntry>,
    /// Maximum operand-stack height, locals excluded.
    pub max_stack_height: u32,
    /// Parameter types followed by declared local types.
    pub local_types: Vec<ValType>,
    pub num_params: u32,
}

impl WasmFunction {
    pub fn num_locals(&self) -> u32 {
        self.local_types.len() as u32
    }

    /// Slots a frame of this function needs: locals plus maximum operand height.
    pub fn frame_slots(&self) -> u32 {
        self.num_locals() + self.max_stack_height
    }

    pub fn body_len(&self) -> u32 {
        (self.body.end - self.body.start) as u32
    }

    /// Index of the first sidetable entry at or after `pc`.
    pub fn stp_for(&self, pc: u32) -> u32 {
        self.sidetable.partition_point(|e| e.branch_pc < pc) as u32
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WasmModule {
    pub bytes: Vec<u8>,
    pub types: Vec<FuncType>,
    pub imports: Vec<Import>,
    /// Defined functions; their function indices start after the imports.
    pub functions: Vec<WasmFunction>,
    pub globals: Vec<Global>,
    pub memory: Option<MemoryType>,
    pub exports: Vec<Export>,
    pub start: Option<u32>,
    pub data: Vec<DataSegment>,
    pub validated: bool,
}

/// Decoding or validation failure while loading a module.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LoadError {
    Malformed(DecodeError),
    Invalid(ValidationError),
}

impl fmt::Display for LoadError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoadError::Malformed(e) => e.fmt(f),
            LoadError::Invalid(e) => e.fmt(f),
        }
    }
}

impl From<DecodeError> for LoadError {
    fn from(e: DecodeError) -> Self {
        LoadError::Malformed(e)
    }
}

impl From<ValidationError> for LoadError {
    fn from(e: ValidationError) -> Self {
        LoadError::Invalid(e)
    }
}

/// Function-index-space entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FuncRef<'m> {
    Import(u32, &'m Import),
    Defined(u32, &'m WasmFunction),
}

impl WasmModule {
    /// Decodes and validates `bytes`, installing sidetables on every function.
    pub fn load(bytes: &[u8]) -> Result<WasmModule, LoadError> {
        let mut m = decode_module(bytes)?;
        m.functions = validate(&m)?;
        m.validated = true;
        Ok(m)
    }

    pub fn num_funcs(&self) -> u32 {
        (self.imports.len() + self.functions.len()) as u32
    }

    pub fn func(&self, idx: u32) -> Option<FuncRef<'_>> {
        let n = self.imports.len() as u32;
        if idx < n {
            Some(FuncRef::Import(idx, &self.imports[idx as usize]))
        } else {
            self.functions.get((idx - n) as usize).map(|f| FuncRef::Defined(idx - n, f))
        }
    }

    /// Signature of function `idx` in the function index space.
    pub fn func_type(&self, idx: u32) -> Option<&FuncType> {
        let ty = match self.func(idx)? {
            FuncRef::Import(_, i) => i.type_idx,
            FuncRef::Defined(_, f) => f.type_idx,
        };
        self.types.get(ty as usize)
    }

    /// Defined function by its function-space index.
    pub fn defined(&self, idx: u32) -> Option<&WasmFunction> {
        match self.func(idx)? {
            FuncRef::Defined(_, f) => Some(f),
            FuncRef::Import(..) => None,
        }
    }

    pub fn body_bytes(&self, f: &WasmFunction) -> &[u8] {
        &self.bytes[f.body.clone()]
    }

    pub fn export(&self, name: &str) -> Option<&Export> {
        self.exports.iter().find(|e| e.name == name)
    }

    /// The function a harness should run: `_start`, then `main`, then the first
    /// exported function.
    pub fn entry_export(&self) -> Option<u32> {
        for name in ["_start", "main"] {
            if let Some(e) = self.export(name) {
                if e.kind == ExportKind::Func {
                    return Some(e.index);
                }
            }
        }
        self.exports.iter().find(|e| e.kind == ExportKind::Func).map(|e| e.index)
    }
}
