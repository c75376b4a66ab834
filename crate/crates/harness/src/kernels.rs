//! Generated stand-ins for benchmark suites: small numeric kernels built with
//! the module builder. Each exports `main: () -> i64` returning a checksum.

use spc_core::wasm::builder::{FuncBody, MemArg, ModuleBuilder, Op};
use spc_core::wasm::opcodes as op;
use spc_core::wasm::ValType::{self, *};

pub struct Kernel {
    pub name: &'static str,
    pub bytes: Vec<u8>,
}

/// Every shipped kernel.
pub fn all() -> Vec<Kernel> {
    vec![
        Kernel { name: "matmul", bytes: matmul(24) },
        Kernel { name: "prefix_sum", bytes: prefix_sum(4096, 8) },
        Kernel { name: "bitmix", bytes: bitmix(4000) },
        Kernel { name: "pointer_chase", bytes: pointer_chase(8192, 40_000) },
        Kernel { name: "const_heavy", bytes: const_heavy(3000) },
        Kernel { name: "arith", bytes: arith(100_000) },
        Kernel { name: "fpoly", bytes: fpoly(20_000) },
        Kernel { name: "dispatch", bytes: dispatch(2048, 20_000) },
    ]
}

fn p(o: u8) -> Op {
    Op::Plain(o)
}

fn mem(offset: u32) -> MemArg {
    MemArg { align: 0, offset }
}

fn i32c(v: i32) -> Op {
    Op::I32Const(v)
}

/// `for var in 0..limit { body }`.
fn for_loop(var: u32, limit: i32, body: &[Op]) -> Vec<Op> {
    unrolled(var, 0, limit, body, 1)
}

/// `for var in start..limit { body }` with `copies` bodies per trip; the
/// trip count must divide evenly.
fn unrolled(var: u32, start: i32, limit: i32, body: &[Op], copies: i32) -> Vec<Op> {
    assert_eq!((limit - start) % copies, 0, "uneven unroll");
    let mut v = vec![i32c(start), Op::LocalSet(var), Op::Block(None), Op::Loop(None), Op::LocalGet(var), i32c(limit), p(op::I32_GE_S), Op::BrIf(1)];
    for _ in 0..copies {
        v.extend_from_slice(body);
        v.extend([Op::LocalGet(var), i32c(1), p(op::I32_ADD), Op::LocalSet(var)]);
    }
    v.extend([Op::Br(0), Op::End, Op::End]);
    v
}

fn module(locals: &[(u32, ValType)], body: Vec<Op>, pages: u32) -> Vec<u8> {
    let mut b = ModuleBuilder::new();
    let t = b.add_type(&[], Some(I64));
    let f = b.add_function(t, locals, FuncBody::from_ops(&body));
    b.add_memory(pages, Some(pages * 2));
    b.export_func("main", f);
    b.build().expect("kernel builds")
}

/// `[i*n + j] * 4`, pushed.
fn index2(i: u32, n: i32, j: u32) -> Vec<Op> {
    vec![Op::LocalGet(i), i32c(n), p(op::I32_MUL), Op::LocalGet(j), p(op::I32_ADD), i32c(2), p(op::I32_SHL)]
}

/// Integer matrix multiply of two `n`×`n` matrices, inner loop unrolled by 8.
pub fn matmul(n: i32) -> Vec<u8> {
    const K_COPIES: u32 = 8;
    assert_eq!(n % K_COPIES as i32, 0, "uneven unroll");
    let (i, j, k, acc, sum) = (0, 1, 2, 3, 4);
    let nn = n * n;
    let (a, b, c) = (0u32, (nn * 4) as u32, (nn * 8) as u32);
    let mut body = unrolled(
        i,
        0,
        nn,
        &[
            Op::LocalGet(i),
            i32c(2),
            p(op::I32_SHL),
            Op::LocalGet(i),
            i32c(3),
            p(op::I32_MUL),
            i32c(1),
            p(op::I32_ADD),
            Op::Store(op::I32_STORE, mem(a)),
            Op::LocalGet(i),
            i32c(2),
            p(op::I32_SHL),
            Op::LocalGet(i),
            i32c(0x55),
            p(op::I32_XOR),
            Op::Store(op::I32_STORE, mem(b)),
        ],
        16,
    );
    let mut inner = Vec::new();
    for u in 0..K_COPIES {
        // acc += A[i][k+u] * B[k+u][j]
        inner.push(Op::LocalGet(acc));
        inner.extend(index2(i, n, k));
        inner.push(Op::Load(op::I32_LOAD, mem(a + 4 * u)));
        inner.extend([Op::LocalGet(k), i32c(u as i32), p(op::I32_ADD), i32c(n), p(op::I32_MUL), Op::LocalGet(j), p(op::I32_ADD), i32c(2), p(op::I32_SHL)]);
        inner.push(Op::Load(op::I32_LOAD, mem(b)));
        inner.extend([p(op::I32_MUL), p(op::I32_ADD), Op::LocalSet(acc)]);
    }
    inner.extend([Op::LocalGet(k), i32c(K_COPIES as i32 - 1), p(op::I32_ADD), Op::LocalSet(k)]);
    let mut row = vec![i32c(0), Op::LocalSet(acc)];
    row.extend(for_loop(k, n, &inner));
    row.extend(index2(i, n, j));
    row.extend([Op::LocalGet(acc), Op::Store(op::I32_STORE, mem(c))]);
    let cols = for_loop(j, n, &row);
    body.extend(for_loop(i, n, &cols));
    body.extend(unrolled(
        i,
        0,
        nn,
        &[
            Op::LocalGet(sum),
            Op::LocalGet(i),
            i32c(2),
            p(op::I32_SHL),
            Op::Load(op::I32_LOAD, mem(c)),
            p(op::I64_EXTEND_I32_U),
            p(op::I64_ADD),
            Op::LocalSet(sum),
        ],
        16,
    ));
    body.push(Op::LocalGet(sum));
    module(&[(4, I32), (1, I64)], body, 1)
}

/// Repeated in-place prefix sums over `n` i64 values; `n - 1` must be a
/// multiple of 15.
pub fn prefix_sum(n: i32, passes: i32) -> Vec<u8> {
    let (i, pass) = (0, 1);
    let addr = |d: i32| vec![Op::LocalGet(i), i32c(d), p(op::I32_ADD), i32c(3), p(op::I32_SHL)];
    let mut init = addr(0);
    init.extend([Op::LocalGet(i), i32c(7), p(op::I32_MUL), i32c(13), p(op::I32_REM_U), p(op::I64_EXTEND_I32_U), Op::Store(op::I64_STORE, mem(0))]);
    let mut body = unrolled(i, 0, n, &init, 16);
    let mut step = addr(0);
    step.extend(addr(0));
    step.push(Op::Load(op::I64_LOAD, mem(0)));
    step.extend(addr(-1));
    step.extend([Op::Load(op::I64_LOAD, mem(0)), p(op::I64_ADD), Op::Store(op::I64_STORE, mem(0))]);
    // element 0 has no predecessor
    let pass_body = unrolled(i, 1, n, &step, 15);
    body.extend(for_loop(pass, passes, &pass_body));
    body.extend([i32c((n - 1) * 8), Op::Load(op::I64_LOAD, mem(0)), i32c((n / 2) * 8), Op::Load(op::I64_LOAD, mem(0)), p(op::I64_XOR)]);
    module(&[(2, I32)], body, 1)
}

/// Xorshift and multiply-add mixing over an i32 and an i64 state, 8 rounds
/// unrolled per iteration.
pub fn bitmix(iters: i32) -> Vec<u8> {
    let (i, x, y) = (0, 1, 2);
    let mut round = Vec::new();
    for r in 0..8 {
        for (sh, o) in [(13, op::I32_SHL), (17, op::I32_SHR_U), (5, op::I32_SHL)] {
            round.extend([Op::LocalGet(x), Op::LocalGet(x), i32c(sh), p(o), p(op::I32_XOR), Op::LocalSet(x)]);
        }
        round.extend([
            Op::LocalGet(y),
            Op::I64Const(6364136223846793005),
            p(op::I64_MUL),
            Op::LocalGet(x),
            p(op::I64_EXTEND_I32_U),
            p(op::I64_ADD),
            Op::I64Const(r + 1),
            p(op::I64_XOR),
            Op::LocalSet(y),
            Op::LocalGet(y),
            Op::I64Const(29),
            p(op::I64_SHR_U),
            p(op::I32_WRAP_I64),
            Op::LocalGet(x),
            p(op::I32_ADD),
            Op::LocalSet(x),
        ]);
    }
    let mut body = vec![i32c(0x1234_5678), Op::LocalSet(x), Op::I64Const(42), Op::LocalSet(y)];
    body.extend(unrolled(i, 0, iters, &round, 4));
    body.extend([Op::LocalGet(y), Op::LocalGet(x), p(op::I64_EXTEND_I32_U), p(op::I64_XOR)]);
    module(&[(2, I32), (1, I64)], body, 1)
}

/// Follows a permutation stored in memory for `steps` steps.
pub fn pointer_chase(n: i32, steps: i32) -> Vec<u8> {
    let (i, q, sum) = (0, 1, 2);
    let mut body = unrolled(
        i,
        0,
        n,
        &[
            Op::LocalGet(i),
            i32c(2),
            p(op::I32_SHL),
            Op::LocalGet(i),
            i32c(7919),
            p(op::I32_MUL),
            i32c(13),
            p(op::I32_ADD),
            i32c(n - 1),
            p(op::I32_AND),
            Op::Store(op::I32_STORE, mem(0)),
        ],
        32,
    );
    body.extend(unrolled(
        i,
        0,
        steps,
        &[
            Op::LocalGet(q),
            i32c(2),
            p(op::I32_SHL),
            Op::Load(op::I32_LOAD, mem(0)),
            Op::LocalTee(q),
            p(op::I64_EXTEND_I32_U),
            Op::LocalGet(sum),
            p(op::I64_ADD),
            Op::LocalSet(sum),
        ],
        32,
    ));
    body.push(Op::LocalGet(sum));
    module(&[(2, I32), (1, I64)], body, 1)
}

/// A loop whose body is mostly constant subexpressions, constant locals and
/// identities: every chain folds to at most one instruction with constant
/// tracking on.
pub fn const_heavy(iters: i32) -> Vec<u8> {
    let (i, acc, k) = (0, 1, 2);
    let mut body_ops = Vec::new();
    for c in 0..24 {
        body_ops.extend([
            // acc = acc + (c*3 + 5) * 2
            Op::LocalGet(acc),
            i32c(c),
            i32c(3),
            p(op::I32_MUL),
            i32c(5),
            p(op::I32_ADD),
            i32c(2),
            p(op::I32_MUL),
            p(op::I32_ADD),
            // + k - k, with k a known constant local
            Op::LocalGet(k),
            p(op::I32_ADD),
            Op::LocalGet(k),
            p(op::I32_SUB),
            // ^ (0 | 0), * 1
            i32c(0),
            i32c(0),
            p(op::I32_OR),
            p(op::I32_XOR),
            i32c(1),
            p(op::I32_MUL),
            Op::LocalSet(acc),
        ]);
    }
    body_ops.extend([Op::LocalGet(acc), Op::LocalGet(i), p(op::I32_XOR), Op::LocalSet(acc)]);
    let mut body = vec![i32c(11), Op::LocalSet(k)];
    body.extend(unrolled(i, 0, iters, &body_ops, 2));
    body.extend([Op::LocalGet(acc), p(op::I64_EXTEND_I32_U)]);
    module(&[(3, I32)], body, 1)
}

/// A call-free integer loop of `iters` iterations.
pub fn arith(iters: i32) -> Vec<u8> {
    let (i, a, b, c) = (0, 1, 2, 3);
    let step = [
        Op::LocalGet(a),
        i32c(3),
        p(op::I32_MUL),
        Op::LocalGet(b),
        p(op::I32_ADD),
        Op::LocalSet(a),
        Op::LocalGet(b),
        Op::LocalGet(a),
        i32c(3),
        p(op::I32_SHR_U),
        p(op::I32_XOR),
        Op::LocalSet(b),
        Op::LocalGet(c),
        Op::LocalGet(a),
        i32c(255),
        p(op::I32_AND),
        p(op::I32_ADD),
        Op::LocalSet(c),
    ];
    let mut body = vec![i32c(1), Op::LocalSet(a), i32c(7), Op::LocalSet(b)];
    body.extend(unrolled(i, 0, iters, &step, 32));
    body.extend([Op::LocalGet(a), Op::LocalGet(b), p(op::I32_ADD), Op::LocalGet(c), p(op::I32_ADD), p(op::I64_EXTEND_I32_U)]);
    module(&[(4, I32)], body, 1)
}

/// Horner evaluation of a degree-5 polynomial plus a square root, in f64.
pub fn fpoly(n: i32) -> Vec<u8> {
    let (i, x, s) = (0, 1, 2);
    let coeffs = [0.5, -1.25, 2.0, 0.75, -0.125, 0.0625];
    let mut step = vec![Op::LocalGet(i), p(op::F64_CONVERT_I32_S), Op::f64(0.001), p(op::F64_MUL), Op::LocalSet(x), Op::f64(coeffs[0])];
    for &c in &coeffs[1..] {
        step.extend([Op::LocalGet(x), p(op::F64_MUL), Op::f64(c), p(op::F64_ADD)]);
    }
    step.extend([p(op::F64_ABS), p(op::F64_SQRT), Op::LocalGet(s), p(op::F64_ADD), Op::LocalSet(s)]);
    let mut body = unrolled(i, 0, n, &step, 16);
    body.extend([Op::LocalGet(s), Op::f64(100.0), p(op::F64_MUL), p(op::I32_TRUNC_F64_S), p(op::I64_EXTEND_I32_S)]);
    module(&[(1, I32), (2, F64)], body, 1)
}

/// A bytecode-interpreter-shaped loop: `steps` dispatches through a
/// `br_table` over `handlers` nested blocks.
pub fn dispatch(handlers: u32, steps: i32) -> Vec<u8> {
    let (i, opv, acc, pc) = (0, 1, 2, 3);
    let n = handlers;
    // program: byte k = (k * 37 + 11) & 0xff, spread to the handler count below
    let mut body = for_loop(
        i,
        4096,
        &[Op::LocalGet(i), Op::LocalGet(i), i32c(37), p(op::I32_MUL), i32c(11), p(op::I32_ADD), Op::Store(op::I32_STORE8, mem(0))],
    );
    let mut step = vec![
        Op::LocalGet(pc),
        i32c(4095),
        p(op::I32_AND),
        Op::Load(op::I32_LOAD8_U, mem(0)),
        Op::LocalGet(acc),
        p(op::I32_XOR),
        i32c(n as i32 - 1),
        p(op::I32_AND),
        Op::LocalSet(opv),
        Op::Block(None),
    ];
    step.extend((0..n).map(|_| Op::Block(None)));
    step.extend([Op::LocalGet(opv), Op::BrTable((0..n).collect(), n - 1), Op::End]);
    for h in 0..n {
        let h = h as i32;
        step.extend([
            Op::LocalGet(acc),
            i32c(h * 2 + 1),
            p(op::I32_MUL),
            i32c(h ^ 0x5a),
            p(op::I32_XOR),
            Op::LocalGet(pc),
            i32c(h % 7 + 1),
            p(op::I32_ADD),
            Op::LocalSet(pc),
            Op::LocalSet(acc),
            Op::Br(n - 1 - h as u32),
            Op::End,
        ]);
    }
    body.extend(for_loop(i, steps, &step));
    body.extend([Op::LocalGet(acc), p(op::I64_EXTEND_I32_U)]);
    module(&[(4, I32)], body, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use spc_core::engine::{Engine, EngineConfig, ExecMode, Outcome};
    use spc_core::wasm::WasmModule;

    #[test]
    fn kernels_validate() {
        for k in all() {
            let m = WasmModule::load(&k.bytes).unwrap_or_else(|e| panic!("{}: {e}", k.name));
            assert_eq!(m.entry_export(), Some(0), "{}", k.name);
        }
    }

    #[test]
    fn kernels_return_in_every_tier() {
        for k in all() {
            let m = WasmModule::load(&k.bytes).unwrap();
            let mut results = Vec::new();
            for mode in [ExecMode::Interp, ExecMode::Jit] {
                let mut e = Engine::new(&m, EngineConfig::with_mode(mode)).unwrap();
                results.push(e.invoke(0, &[]).unwrap());
            }
            assert!(matches!(results[0], Outcome::Returned(Some(_))), "{}: {:?}", k.name, results[0]);
            assert_eq!(results[0], results[1], "{}", k.name);
        }
    }

    #[test]
    fn sizes_between_1k_and_100k() {
        for k in all() {
            assert!((1 << 10..100 << 10).contains(&k.bytes.len()), "{}: {} bytes", k.name, k.bytes.len());
        }
    }
}
