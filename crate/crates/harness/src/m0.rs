//! Setup-time bounding modules: `m0` returns early from the entry point but
//! keeps all code, so it still pays for decoding, validation and compilation.

use std::fmt;

use spc_core::wasm::builder::{const_op, ModuleBuilder, Op};
use spc_core::wasm::{LoadError, ValType, WasmModule};

#[derive(Debug)]
pub enum M0Error {
    Load(LoadError),
    NoEntry,
}

impl fmt::Display for M0Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            M0Error::Load(e) => write!(f, "invalid module: {e}"),
            M0Error::NoEntry => f.write_str("module exports no function"),
        }
    }
}

impl std::error::Error for M0Error {}

/// Prepends `if (global.get g) { return <zero> }` to the entry function,
/// where `g` is a new mutable global initialized to 1. The compiler cannot
/// fold a mutable global, so all code after the check is still compiled.
pub fn make_m0(bytes: &[u8]) -> Result<Vec<u8>, M0Error> {
    let m = WasmModule::load(bytes).map_err(M0Error::Load)?;
    let entry = m.entry_export().ok_or(M0Error::NoEntry)?;
    let result = m.func_type(entry).expect("exported function").result;
    let mut b = ModuleBuilder::from_module(&m);
    let g = b.add_global(ValType::I32, true, 1);
    let mut prefix = Vec::new();
    Op::GlobalGet(g).encode(&mut prefix);
    Op::If(None).encode(&mut prefix);
    if let Some(t) = result {
        const_op(t, 0).encode(&mut prefix);
    }
    Op::Return.encode(&mut prefix);
    Op::End.encode(&mut prefix);
    let di = (entry - b.num_imports()) as usize;
    let body = &mut b.functions_mut()[di].body.code;
    body.splice(0..0, prefix);
    Ok(b.build().expect("rebuilt module is well formed"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use spc_core::wasm::builder::{m_nop, FuncBody};

    #[test]
    fn no_exports_is_an_error() {
        let mut b = ModuleBuilder::new();
        let t = b.add_type(&[], None);
        b.add_function(t, &[], FuncBody::from_ops(&[]));
        assert!(matches!(make_m0(&b.build().unwrap()), Err(M0Error::NoEntry)));
    }

    #[test]
    fn m_nop_stays_valid() {
        let m0 = make_m0(&m_nop()).unwrap();
        let m = WasmModule::load(&m0).unwrap();
        assert_eq!(m.globals.len(), 1);
    }
}
