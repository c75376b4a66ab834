//! Random well-typed modules for differential testing.
//!
//! A case is a handful of functions; each may call the host imports and any
//! function defined before it, so the call graph is acyclic. Loops run a
//! bounded number of times through reserved counter locals that no other
//! code writes, and random branches never target a loop, so every case
//! terminates.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spc_core::wasm::builder::{FuncBody, MemArg, ModuleBuilder, Op};
use spc_core::wasm::opcodes as op;
use spc_core::wasm::ValType::{self, *};

/// Host import indices, in declaration order.
pub const GC_SCAN: u32 = 0;
pub const MAKE_REF: u32 = 1;
pub const REF_ID: u32 = 2;
pub const PRINT: u32 = 3;
const NUM_IMPORTS: u32 = 4;

const GLOBALS: [(ValType, bool, u64); 4] = [(I32, true, 7), (I64, true, (-3i64) as u64), (F64, true, 0x3fe0_0000_0000_0000), (I32, false, 42)];

#[derive(Clone, Debug, PartialEq)]
pub struct GenFunc {
    pub params: Vec<ValType>,
    pub result: Option<ValType>,
    /// Declared locals after the parameters.
    pub locals: Vec<ValType>,
    /// Body without the final `end`.
    pub ops: Vec<Op>,
}

/// A generated module; the last function is the exported entry `main`.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub funcs: Vec<GenFunc>,
}

impl Case {
    pub fn build(&self) -> Vec<u8> {
        let mut b = ModuleBuilder::new();
        let t = b.add_type(&[], None);
        b.import_func("host", "gc_scan", t);
        let t = b.add_type(&[I32], Some(Ref));
        b.import_func("host", "make_ref", t);
        let t = b.add_type(&[Ref], Some(I32));
        b.import_func("host", "ref_id", t);
        let t = b.add_type(&[I64], None);
        b.import_func("host", "print", t);
        b.add_memory(1, Some(2));
        for (ty, mutable, init) in GLOBALS {
            b.add_global(ty, mutable, init);
        }
        b.add_data(16, b"differential");
        let mut last = 0;
        for f in &self.funcs {
            let t = b.add_type(&f.params, f.result);
            let locals: Vec<(u32, ValType)> = f.locals.iter().map(|&t| (1, t)).collect();
            last = b.add_function(t, &locals, FuncBody::from_ops(&f.ops));
        }
        b.export_func("main", last);
        b.build().expect("generated module is well formed")
    }

    pub fn num_ops(&self) -> usize {
        self.funcs.iter().map(|f| f.ops.len()).sum()
    }

    /// Whether the case creates refs and scans for roots.
    pub fn scans_refs(&self) -> bool {
        let has = |idx| self.funcs.iter().any(|f| f.ops.contains(&Op::Call(idx)));
        has(GC_SCAN) && (has(MAKE_REF) || self.funcs.iter().any(|f| f.params.contains(&Ref) || f.locals.contains(&Ref)))
    }

    pub fn main_index(&self) -> u32 {
        NUM_IMPORTS + self.funcs.len() as u32 - 1
    }
}

#[derive(Clone, Copy)]
struct Label {
    /// Random branches may target this label.
    open: bool,
}

struct Gen {
    rng: ChaCha8Rng,
    out: Vec<Op>,
    locals: Vec<ValType>,
    reserved: Vec<bool>,
    labels: Vec<Label>,
    /// `(function index, params, result)` of callable defined functions.
    callees: Vec<(u32, Vec<ValType>, Option<ValType>)>,
    budget: i32,
    loops: u32,
    refs: bool,
    result: Option<ValType>,
}

const NUMERIC: [ValType; 4] = [I32, I64, F32, F64];

impl Gen {
    fn chance(&mut self, p: f64) -> bool {
        self.rng.gen_bool(p)
    }

    fn value_type(&mut self) -> ValType {
        if self.refs && self.chance(0.2) {
            Ref
        } else {
            *NUMERIC.choose(&mut self.rng).unwrap()
        }
    }

    fn emit(&mut self, o: Op) {
        self.out.push(o);
    }

    fn const_of(&mut self, t: ValType) -> Op {
        let r = &mut self.rng;
        match t {
            I32 => Op::I32Const(*[0, 1, -1, 2, 7, i32::MIN, i32::MAX, 255, r.gen_range(-100..100), r.gen()].choose(r).unwrap()),
            I64 => Op::I64Const(*[0, 1, -1, 3, i64::MIN, i64::MAX, 1 << 40, r.gen_range(-100..100), r.gen()].choose(r).unwrap()),
            F32 => Op::f32(*[0.0, -0.0, 1.5, -2.25, f32::NAN, f32::INFINITY, 1e10, r.gen_range(-100.0..100.0)].choose(r).unwrap()),
            F64 => Op::f64(*[0.0, -0.0, 0.5, -3.75, f64::NAN, f64::NEG_INFINITY, 2e9, -2.1e9, r.gen_range(-1e4..1e4)].choose(r).unwrap()),
            Ref => Op::RefNull,
        }
    }

    fn local_of(&mut self, t: ValType, writable: bool) -> Option<u32> {
        let c: Vec<u32> = (0..self.locals.len()).filter(|&i| self.locals[i] == t && !(writable && self.reserved[i])).map(|i| i as u32).collect();
        c.choose(&mut self.rng).copied()
    }

    fn global_of(&mut self, t: ValType, writable: bool) -> Option<u32> {
        let c: Vec<u32> = (0..GLOBALS.len()).filter(|&i| GLOBALS[i].0 == t && (!writable || GLOBALS[i].1)).map(|i| i as u32).collect();
        c.choose(&mut self.rng).copied()
    }

    fn leaf(&mut self, t: ValType) {
        let pick = self.rng.gen_range(0..10);
        if pick < 5 {
            if let Some(i) = self.local_of(t, false) {
                return self.emit(Op::LocalGet(i));
            }
        }
        if pick == 5 {
            if let Some(g) = self.global_of(t, false) {
                return self.emit(Op::GlobalGet(g));
            }
        }
        let c = self.const_of(t);
        self.emit(c);
    }

    fn address(&mut self, d: u32) {
        self.expr(I32, d);
        if self.chance(0.95) {
            self.emit(Op::I32Const(0xfff0));
            self.emit(Op::Plain(op::I32_AND));
        }
    }

    fn mem_offset(&mut self) -> MemArg {
        let offset = if self.chance(0.03) { 0xffff_0000 } else { *[0, 4, 8, 100].choose(&mut self.rng).unwrap() };
        MemArg { align: 0, offset }
    }

    fn args(&mut self, params: &[ValType], d: u32) {
        for &p in params {
            self.expr(p, d);
        }
    }

    fn callee_returning(&mut self, t: Option<ValType>) -> Option<(u32, Vec<ValType>)> {
        let c: Vec<_> = self.callees.iter().filter(|c| c.2 == t).map(|c| (c.0, c.1.clone())).collect();
        c.choose(&mut self.rng).cloned()
    }

    /// Pushes one value of type `t`.
    fn expr(&mut self, t: ValType, d: u32) {
        if d == 0 || self.budget <= 0 {
            return self.leaf(t);
        }
        self.budget -= 1;
        let d = d - 1;
        if t == Ref {
            match self.rng.gen_range(0..4) {
                0 => self.leaf(Ref),
                1 | 2 => {
                    self.expr(I32, d);
                    self.emit(Op::Call(MAKE_REF));
                }
                _ => match self.local_of(Ref, true) {
                    Some(i) => {
                        self.expr(Ref, d);
                        self.emit(Op::LocalTee(i));
                    }
                    None => self.emit(Op::RefNull),
                },
            }
            return;
        }
        let int = t == I32 || t == I64;
        let w32 = t == I32 || t == F32;
        match self.rng.gen_range(0..22) {
            0..=2 => self.leaf(t),
            3..=6 => {
                self.expr(t, d);
                self.expr(t, d);
                let o = match (int, w32) {
                    (true, true) => *[op::I32_ADD, op::I32_SUB, op::I32_MUL, op::I32_DIV_S, op::I32_DIV_U, op::I32_REM_S, op::I32_REM_U, op::I32_AND, op::I32_OR, op::I32_XOR, op::I32_SHL, op::I32_SHR_S, op::I32_SHR_U]
                        .choose(&mut self.rng)
                        .unwrap(),
                    (true, false) => *[op::I64_ADD, op::I64_SUB, op::I64_MUL, op::I64_DIV_S, op::I64_DIV_U, op::I64_REM_S, op::I64_REM_U, op::I64_AND, op::I64_OR, op::I64_XOR, op::I64_SHL, op::I64_SHR_S, op::I64_SHR_U]
                        .choose(&mut self.rng)
                        .unwrap(),
                    (false, true) => *[op::F32_ADD, op::F32_SUB, op::F32_MUL, op::F32_DIV].choose(&mut self.rng).unwrap(),
                    (false, false) => *[op::F64_ADD, op::F64_SUB, op::F64_MUL, op::F64_DIV].choose(&mut self.rng).unwrap(),
                };
                self.emit(Op::Plain(o));
            }
            7 if !int => {
                self.expr(t, d);
                let o = if w32 { [op::F32_NEG, op::F32_ABS, op::F32_SQRT] } else { [op::F64_NEG, op::F64_ABS, op::F64_SQRT] };
                let o = *o.choose(&mut self.rng).unwrap();
                self.emit(Op::Plain(o));
            }
            7 | 8 if t == I32 => {
                // comparison of any numeric type
                let a = *NUMERIC.choose(&mut self.rng).unwrap();
                self.expr(a, d);
                if (a == I32 || a == I64) && self.chance(0.25) {
                    self.emit(Op::Plain(if a == I32 { op::I32_EQZ } else { op::I64_EQZ }));
                    return;
                }
                self.expr(a, d);
                let o = match a {
                    I32 => op::I32_EQ..=op::I32_GE_U,
                    I64 => op::I64_EQ..=op::I64_GE_U,
                    F32 => op::F32_EQ..=op::F32_GE,
                    _ => op::F64_EQ..=op::F64_GE,
                };
                let o = self.rng.gen_range(o);
                self.emit(Op::Plain(o));
            }
            9 => match t {
                I32 if self.chance(0.5) => {
                    self.expr(I64, d);
                    self.emit(Op::Plain(op::I32_WRAP_I64));
                }
                I32 => {
                    self.expr(F64, d);
                    self.emit(Op::Plain(op::I32_TRUNC_F64_S));
                }
                I64 => {
                    self.expr(I32, d);
                    let o = if self.chance(0.5) { op::I64_EXTEND_I32_S } else { op::I64_EXTEND_I32_U };
                    self.emit(Op::Plain(o));
                }
                F64 => {
                    self.expr(I32, d);
                    self.emit(Op::Plain(op::F64_CONVERT_I32_S));
                }
                _ => self.leaf(t),
            },
            10 | 11 => {
                self.address(d);
                let o = match t {
                    I32 if self.chance(0.3) => op::I32_LOAD8_U,
                    I32 => op::I32_LOAD,
                    I64 => op::I64_LOAD,
                    F32 => op::F32_LOAD,
                    _ => op::F64_LOAD,
                };
                let m = self.mem_offset();
                self.emit(Op::Load(o, m));
            }
            12 => match self.local_of(t, true) {
                Some(i) => {
                    self.expr(t, d);
                    self.emit(Op::LocalTee(i));
                }
                None => self.leaf(t),
            },
            13 => {
                self.expr(t, d);
                self.expr(t, d);
                self.expr(I32, d);
                self.emit(Op::Select);
            }
            14 => {
                self.expr(I32, d);
                self.emit(Op::If(Some(t)));
                self.labels.push(Label { open: false });
                self.stmts(1, d);
                self.expr(t, d);
                self.emit(Op::Else);
                self.stmts(1, d);
                self.expr(t, d);
                self.labels.pop();
                self.emit(Op::End);
            }
            15 => {
                // block (result t) with an early exit
                self.emit(Op::Block(Some(t)));
                self.labels.push(Label { open: false });
                self.stmts(1, d);
                self.expr(t, d);
                self.expr(I32, d);
                self.emit(Op::BrIf(0));
                self.emit(Op::Drop);
                self.stmts(1, d);
                self.expr(t, d);
                self.labels.pop();
                self.emit(Op::End);
            }
            16 | 17 => match self.callee_returning(Some(t)) {
                Some((f, params)) => {
                    self.args(&params, d);
                    self.emit(Op::Call(f));
                }
                None => self.leaf(t),
            },
            18 if t == I32 => {
                if self.chance(0.7) {
                    self.emit(Op::MemorySize);
                } else {
                    self.expr(I32, d);
                    self.emit(Op::I32Const(1));
                    self.emit(Op::Plain(op::I32_AND));
                    self.emit(Op::MemoryGrow);
                }
            }
            19 | 20 if t == I32 && self.refs => {
                self.expr(Ref, d);
                let o = if self.chance(0.5) { Op::RefIsNull } else { Op::Call(REF_ID) };
                self.emit(o);
            }
            _ => self.leaf(t),
        }
    }

    fn stmts(&mut self, n: u32, d: u32) {
        for _ in 0..n {
            self.stmt(d);
        }
    }

    /// Depths of labels a random branch may target.
    fn targets(&self) -> Vec<u32> {
        let n = self.labels.len();
        (0..n).filter(|&k| self.labels[n - 1 - k].open).map(|k| k as u32).collect()
    }

    fn block(&mut self, body: impl FnOnce(&mut Gen)) {
        self.emit(Op::Block(None));
        self.labels.push(Label { open: true });
        body(self);
        self.labels.pop();
        self.emit(Op::End);
    }

    fn stmt(&mut self, d: u32) {
        if self.budget <= 0 {
            return;
        }
        self.budget -= 1;
        let d = d.saturating_sub(1);
        match self.rng.gen_range(0..20) {
            0..=3 => {
                let t = self.value_type();
                match self.local_of(t, true) {
                    Some(i) => {
                        self.expr(t, d + 1);
                        self.emit(Op::LocalSet(i));
                    }
                    None => {
                        self.expr(t, d + 1);
                        self.emit(Op::Drop);
                    }
                }
            }
            4 => {
                let t = *[I32, I64, F64].choose(&mut self.rng).unwrap();
                let g = self.global_of(t, true).expect("mutable global of each type");
                self.expr(t, d);
                self.emit(Op::GlobalSet(g));
            }
            5 | 6 => {
                self.address(d);
                let t = *NUMERIC.choose(&mut self.rng).unwrap();
                self.expr(t, d);
                let o = match t {
                    I32 if self.chance(0.3) => op::I32_STORE8,
                    I32 => op::I32_STORE,
                    I64 => op::I64_STORE,
                    F32 => op::F32_STORE,
                    _ => op::F64_STORE,
                };
                let m = self.mem_offset();
                self.emit(Op::Store(o, m));
            }
            7 => {
                self.expr(I64, d);
                self.emit(Op::Call(PRINT));
            }
            8 => self.emit(Op::Call(GC_SCAN)),
            9 => {
                self.expr(I32, d);
                self.emit(Op::If(None));
                self.labels.push(Label { open: true });
                let n = self.rng.gen_range(1..3);
                self.stmts(n, d);
                if self.chance(0.5) {
                    self.emit(Op::Else);
                    self.stmts(n, d);
                }
                self.labels.pop();
                self.emit(Op::End);
            }
            10 | 11 => self.block(|g| {
                let n = g.rng.gen_range(0..3);
                g.stmts(n, d);
                g.expr(I32, d);
                let k = *g.targets().choose(&mut g.rng).expect("own label");
                g.emit(Op::BrIf(k));
                g.stmts(n, d);
            }),
            12 => self.block(|g| {
                g.stmts(1, d);
                g.expr(I32, d);
                let ts = g.targets();
                let n = g.rng.gen_range(0..4);
                let table = (0..n).map(|_| *ts.choose(&mut g.rng).unwrap()).collect();
                let default = *ts.choose(&mut g.rng).unwrap();
                g.emit(Op::BrTable(table, default));
            }),
            13 | 14 if self.loops < 4 => {
                // bounded loop: the counter is written only here
                self.loops += 1;
                let c = self.locals.len() as u32;
                self.locals.push(I32);
                self.reserved.push(true);
                let trips = self.rng.gen_range(1..6);
                self.emit(Op::I32Const(trips));
                self.emit(Op::LocalSet(c));
                self.emit(Op::Loop(None));
                self.labels.push(Label { open: false });
                let n = self.rng.gen_range(1..4);
                self.stmts(n, d);
                self.labels.pop();
                self.emit(Op::LocalGet(c));
                self.emit(Op::I32Const(1));
                self.emit(Op::Plain(op::I32_SUB));
                self.emit(Op::LocalTee(c));
                self.emit(Op::BrIf(0));
                self.emit(Op::End);
            }
            15 => {
                self.expr(I32, d);
                self.emit(Op::If(None));
                self.labels.push(Label { open: true });
                if self.chance(0.15) {
                    self.emit(Op::Unreachable);
                } else {
                    if let Some(t) = self.result {
                        self.expr(t, d);
                    }
                    self.emit(Op::Return);
                }
                self.labels.pop();
                self.emit(Op::End);
            }
            16 | 17 => {
                let want = if self.chance(0.5) { None } else { Some(self.value_type()) };
                if let Some((f, params)) = self.callee_returning(want) {
                    self.args(&params, d);
                    self.emit(Op::Call(f));
                    if want.is_some() {
                        self.emit(Op::Drop);
                    }
                }
            }
            18 if self.refs => {
                self.expr(I32, d);
                self.emit(Op::Call(MAKE_REF));
                match self.local_of(Ref, true) {
                    Some(i) => self.emit(Op::LocalSet(i)),
                    None => self.emit(Op::Drop),
                }
                self.emit(Op::Call(GC_SCAN));
            }
            _ => {
                let t = self.value_type();
                self.expr(t, d);
                self.emit(Op::Drop);
            }
        }
    }
}

/// Size knobs for generated cases.
#[derive(Clone, Copy, Debug)]
pub struct GenOptions {
    pub max_funcs: u32,
    /// Rough upper bound on instructions per function.
    pub budget: i32,
    pub depth: u32,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions { max_funcs: 4, budget: 60, depth: 4 }
    }
}

/// The case for `(seed, index)`; the same pair always yields the same case.
pub fn generate(seed: u64, index: u64, opts: &GenOptions) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let refs = rng.gen_bool(0.5);
    let n = rng.gen_range(1..=opts.max_funcs);
    let mut funcs: Vec<GenFunc> = Vec::new();
    for k in 0..n {
        let main = k == n - 1;
        let mut g = Gen {
            rng: ChaCha8Rng::seed_from_u64(rng.gen()),
            out: Vec::new(),
            locals: Vec::new(),
            reserved: Vec::new(),
            labels: Vec::new(),
            callees: funcs.iter().enumerate().map(|(i, f)| (NUM_IMPORTS + i as u32, f.params.clone(), f.result)).collect(),
            budget: opts.budget,
            loops: 0,
            refs,
            result: None,
        };
        let params: Vec<ValType> = if main { Vec::new() } else { (0..g.rng.gen_range(0..4)).map(|_| g.value_type()).collect() };
        let result = if main { Some(*[I32, I64].choose(&mut g.rng).unwrap()) } else if g.chance(0.75) { Some(g.value_type()) } else { None };
        let extra: Vec<ValType> = (0..g.rng.gen_range(0..6)).map(|_| g.value_type()).collect();
        g.locals = params.iter().chain(&extra).copied().collect();
        g.reserved = vec![false; g.locals.len()];
        g.result = result;
        g.labels.push(Label { open: false });
        let stmts = g.rng.gen_range(2..8);
        g.stmts(stmts, opts.depth);
        if let Some(t) = result {
            g.budget = g.budget.max(4);
            g.expr(t, opts.depth);
        }
        let locals = g.locals[params.len()..].to_vec();
        funcs.push(GenFunc { params, result, locals, ops: g.out });
    }
    Case { funcs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use spc_core::wasm::WasmModule;

    #[test]
    fn generated_cases_validate() {
        for i in 0..300 {
            let c = generate(7, i, &GenOptions::default());
            if let Err(e) = WasmModule::load(&c.build()) {
                panic!("case {i}: {e}\n{c:#?}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for i in 0..20 {
            assert_eq!(generate(3, i, &GenOptions::default()), generate(3, i, &GenOptions::default()));
        }
        assert_ne!(generate(3, 0, &GenOptions::default()), generate(4, 0, &GenOptions::default()));
    }
}
