//! Checked-in disassembly. Set `SPC_BLESS=1` to rewrite the files after
//! reviewing a codegen change.

use std::path::PathBuf;

use spc_core::compiler::{compile_function, CompilerConfig};
use spc_core::visa::Instr;
use spc_core::wasm::builder::{FuncBody, ModuleBuilder, Op};
use spc_core::wasm::opcodes as op;
use spc_core::wasm::{ValType, WasmModule};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn check(name: &str, text: &str) {
    let path = data(name);
    if std::env::var_os("SPC_BLESS").is_some() {
        std::fs::write(&path, text).unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(text, want, "disassembly of {name} changed; review and rerun with SPC_BLESS=1");
}

/// Two parameters arriving in stack slots, added, plus a constant.
fn add_const() -> WasmModule {
    let mut b = ModuleBuilder::new();
    let t = b.add_type(&[ValType::I32, ValType::I32], Some(ValType::I32));
    b.add_function(
        t,
        &[],
        FuncBody::from_ops(&[Op::LocalGet(0), Op::LocalGet(1), Op::Plain(op::I32_ADD), Op::I32Const(5), Op::Plain(op::I32_ADD)]),
    );
    WasmModule::load(&b.build().unwrap()).unwrap()
}

#[test]
fn add_const_allopt() {
    let m = add_const();
    let cf = compile_function(&m, 0, &CompilerConfig::allopt());
    check("add_const.allopt.dis", &cf.disassemble());

    let code = &cf.program.instrs;
    let mut loaded = Vec::new();
    for i in code {
        match i {
            Instr::StoreSlot { .. } | Instr::StoreSlotImm { .. } => panic!("spill in {i:?}"),
            Instr::MovRR { dst, src } => assert_ne!(dst, src),
            Instr::LoadSlot { slot, .. } => {
                assert!(!loaded.contains(slot), "slot {slot} loaded twice");
                loaded.push(*slot);
            }
            _ => {}
        }
    }
    // the only move places the result in the return register
    assert_eq!(cf.metrics.moves_emitted, 1);
    assert_eq!(cf.metrics.spills_emitted, 0);
}

#[test]
fn add_const_nok() {
    let m = add_const();
    let cf = compile_function(&m, 0, &CompilerConfig::parse("nok").unwrap());
    check("add_const.nok.dis", &cf.disassemble());
}
