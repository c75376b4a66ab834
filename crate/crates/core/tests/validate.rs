//! Validation cost scales with body size, not nesting depth. The only test
//! in its binary, so nothing else competes for the CPU while it measures.

use std::time::Instant;

use spc_core::wasm::builder::{FuncBody, ModuleBuilder, Op};
use spc_core::wasm::{decode_module, validate};
use spc_core::wasm::opcodes as op;
use spc_core::wasm::ValType::I32;

/// One function of roughly `size` body bytes, nested `size / 15` blocks deep.
fn nested(size: usize) -> Vec<u8> {
    let depth = (size / 15).max(1);
    let mut ops: Vec<Op> = (0..depth).map(|_| Op::Block(None)).collect();
    for _ in 0..depth {
        ops.extend([Op::LocalGet(0), Op::I32Const(3), Op::Plain(op::I32_ADD), Op::LocalTee(0), Op::LocalGet(1), Op::Plain(op::I32_AND), Op::BrIf(0), Op::End]);
    }
    ops.push(Op::LocalGet(0));
    let mut b = ModuleBuilder::new();
    let t = b.add_type(&[I32, I32], Some(I32));
    let f = b.add_function(t, &[], FuncBody::from_ops(&ops));
    b.export_func("main", f);
    b.build().unwrap()
}

#[test]
fn time_per_byte_is_flat() {
    let mut per_byte = Vec::new();
    for k in 0..=10 {
        let bytes = nested(1024 << k);
        let m = decode_module(&bytes).unwrap();
        let reps = (2048 >> k).max(3);
        let best = (0..reps)
            .map(|_| {
                let t = Instant::now();
                std::hint::black_box(validate(&m).unwrap());
                t.elapsed().as_nanos() as f64
            })
            .fold(f64::INFINITY, f64::min);
        per_byte.push(best / m.functions[0].body.len() as f64);
    }
    let mut sorted = per_byte.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    for (k, x) in per_byte.iter().enumerate() {
        assert!(*x < median * 3.0 && x * 3.0 > median, "{} KB: {x:.2} ns/byte vs median {median:.2}", 1 << k);
    }
}
