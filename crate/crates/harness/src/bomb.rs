//! Functions built to stress compile-time scaling: a tower of nested blocks
//! whose depth grows with the requested size.

use spc_core::wasm::builder::{FuncBody, ModuleBuilder, Op};
use spc_core::wasm::opcodes as op;
use spc_core::wasm::ValType::I32;

/// Bytes of body per nesting level (`block` plus its closing sequence).
const LEVEL_BYTES: usize = 15;

/// A module whose single function nests about `size / 15` blocks deep,
/// `size` bytes of body in total.
pub fn nested_blocks(size: usize) -> Vec<u8> {
    let depth = (size / LEVEL_BYTES).max(1);
    let mut ops = Vec::with_capacity(depth * 7);
    ops.extend((0..depth).map(|_| Op::Block(None)));
    for _ in 0..depth {
        ops.extend([Op::LocalGet(0), Op::I32Const(3), Op::Plain(op::I32_ADD), Op::LocalTee(0), Op::LocalGet(1), Op::Plain(op::I32_AND), Op::BrIf(0), Op::End]);
    }
    ops.push(Op::LocalGet(0));
    let mut b = ModuleBuilder::new();
    let t = b.add_type(&[I32, I32], Some(I32));
    let f = b.add_function(t, &[], FuncBody::from_ops(&ops));
    b.export_func("main", f);
    b.build().expect("bomb builds")
}

#[cfg(test)]
mod tests {
    use super::*;
    use spc_core::wasm::WasmModule;

    #[test]
    fn size_tracks_request() {
        for size in [1 << 10, 10 << 10] {
            let m = WasmModule::load(&nested_blocks(size)).unwrap();
            let n = m.functions[0].body.len();
            assert!(n * 10 > size * 9 && n * 10 < size * 11, "{n} for {size}");
        }
    }
}
