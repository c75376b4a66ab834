//! The in-place interpreter.
//!
//! Executes straight from the module bytes. The only per-frame state is the
//! bytecode pc, the sidetable position and the frame pointer; branches take
//! their targets and stack adjustments from the sidetable, so the
//! interpreter never scans for a matching `end`. Every slot write also
//! writes the slot's tag, which makes this tier the reference for tags.

use crate::values::{self, Conv, Numeric, TrapKind, Width};
use crate::wasm::opcodes as op;
use crate::wasm::reader::Reader;
use crate::wasm::{SidetableEntry, ValType, WasmModule};

use crate::runtime::{mem_kind, Machine};

/// Why a tier stopped running.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Event {
    /// The top frame calls `func`; its arguments start at absolute slot `args`.
    /// `pc` is the calling instruction (a vISA pc for compiled frames).
    Call { func: u32, args: u32, pc: u32 },
    /// The top frame returned.
    Return(Option<u64>),
    /// `pc` is a bytecode pc for interpreter frames and a vISA pc otherwise.
    Trap { kind: TrapKind, pc: u32 },
    OutOfFuel,
    /// The top frame reached a loop header.
    LoopHeader,
    /// The interpreter reached a probed instruction.
    Probe(u32),
}

/// Per-run switches for the interpreter.
pub struct InterpEnv<'a> {
    /// Stop at loop headers (for tiering).
    pub watch_loops: bool,
    /// Sorted probed pcs of the running function.
    pub probes: &'a [u32],
    pub trace: Option<&'a mut dyn FnMut(u32, u32, u8, u32)>,
}

/// Result type of a numeric instruction.
pub fn numeric_result(n: Numeric) -> ValType {
    let int = |w| if w == Width::W32 { ValType::I32 } else { ValType::I64 };
    let float = |w| if w == Width::W32 { ValType::F32 } else { ValType::F64 };
    match n {
        Numeric::Int(_, w) => int(w),
        Numeric::Float(_, w) | Numeric::FUn(_, w) => float(w),
        Numeric::Cmp(..) | Numeric::Eqz(_) => ValType::I32,
        Numeric::Conv(c) => match c {
            Conv::WrapI64 | Conv::TruncF64S => ValType::I32,
            Conv::ExtendI32S | Conv::ExtendI32U => ValType::I64,
            Conv::ConvertI32SToF64 => ValType::F64,
        },
    }
}

/// Runs the top frame, which must be an interpreter frame, until it calls,
/// returns, traps, runs out of fuel or hits a stop requested by `env`.
pub fn run(mach: &mut Machine, m: &WasmModule, env: &mut InterpEnv<'_>, fuel: &mut u64) -> Event {
    let fr = *mach.top();
    let func = fr.func();
    let f = m.defined(func).expect("interpreter frame of a defined function");
    let base = f.body.start;
    let end = f.body_len();
    let bytes = &m.bytes[..f.body.end];
    let table: &[SidetableEntry] = &f.sidetable;
    let vfp = fr.vfp() as usize;
    let mut ip = fr.ip();
    let mut stp = fr.stp() as usize;
    let mut sp = mach.sp as usize;
    let mut at_header = false;

    macro_rules! save {
        () => {{
            let t = mach.frames.last_mut().expect("active frame");
            t.set_ip(ip);
            t.set_stp(stp as u32);
            mach.sp = sp as u32;
        }};
    }
    macro_rules! push {
        ($v:expr, $t:expr) => {{
            mach.stack.values[sp] = $v;
            mach.stack.tags[sp] = $t.tag();
            sp += 1;
        }};
    }
    macro_rules! pop {
        () => {{
            sp -= 1;
            mach.stack.values[sp]
        }};
    }
    macro_rules! trap {
        ($k:expr, $pc:expr) => {{
            save!();
            return Event::Trap { kind: $k, pc: $pc };
        }};
    }

    loop {
        let pc = ip;
        if at_header {
            save!();
            return Event::LoopHeader;
        }
        if !mach.skip_probe && env.probes.binary_search(&pc).is_ok() {
            save!();
            return Event::Probe(pc);
        }
        mach.skip_probe = false;
        if *fuel == 0 {
            save!();
            return Event::OutOfFuel;
        }
        *fuel -= 1;
        mach.counters.bytecodes += 1;
        let mut r = Reader::at(bytes, base + pc as usize);
        let opc = r.u8().expect("validated body");
        if let Some(t) = env.trace.as_mut() {
            t(func, pc, opc, (sp - vfp) as u32);
        }
        macro_rules! imm {
            () => {
                r.u32().expect("validated body")
            };
        }
        // Takes the branch recorded at sidetable index `$i`.
        macro_rules! branch {
            ($i:expr) => {{
                let e = table[$i];
                debug_assert_eq!(e.branch_pc, pc);
                let (vals, pops) = (e.val_count as usize, e.pop_count as usize);
                if pops > 0 {
                    for k in sp - vals..sp {
                        mach.stack.values[k - pops] = mach.stack.values[k];
                        mach.stack.tags[k - pops] = mach.stack.tags[k];
                    }
                    sp -= pops;
                }
                stp = e.target_stp as usize;
                ip = e.target_pc;
                if ip == end {
                    break;
                }
                if ip < pc {
                    at_header = env.watch_loops;
                }
                continue;
            }};
        }
        match opc {
            op::UNREACHABLE => trap!(TrapKind::Unreachable, pc),
            op::NOP => {}
            op::BLOCK => {
                r.u8().expect("blocktype");
            }
            op::LOOP => {
                r.u8().expect("blocktype");
                at_header = env.watch_loops;
            }
            op::IF => {
                r.u8().expect("blocktype");
                if pop!() as u32 != 0 {
                    stp += 1;
                } else {
                    branch!(stp);
                }
            }
            op::ELSE => branch!(stp),
            op::END => {
                if r.pos() - base == end as usize {
                    break;
                }
            }
            op::BR => branch!(stp),
            op::BR_IF => {
                imm!();
                if pop!() as u32 != 0 {
                    branch!(stp);
                }
                stp += 1;
            }
            op::BR_TABLE => {
                let n = imm!();
                let i = (pop!() as u32).min(n) as usize;
                branch!(stp + i);
            }
            op::RETURN => break,
            op::CALL => {
                let callee = imm!();
                let n = m.func_type(callee).expect("validated call").params.len();
                ip = (r.pos() - base) as u32;
                save!();
                return Event::Call { func: callee, args: (sp - n) as u32, pc };
            }
            op::DROP => sp -= 1,
            op::SELECT => {
                let c = pop!() as u32;
                let b = pop!();
                if c == 0 {
                    mach.stack.values[sp - 1] = b;
                }
            }
            op::LOCAL_GET => {
                let i = imm!() as usize;
                push!(mach.stack.values[vfp + i], f.local_types[i]);
            }
            op::LOCAL_SET => {
                let i = imm!() as usize;
                let v = pop!();
                mach.stack.write((vfp + i) as u32, v, f.local_types[i]);
            }
            op::LOCAL_TEE => {
                let i = imm!() as usize;
                let v = mach.stack.values[sp - 1];
                mach.stack.write((vfp + i) as u32, v, f.local_types[i]);
            }
            op::GLOBAL_GET => {
                let g = imm!() as usize;
                push!(mach.globals[g], m.globals[g].ty);
            }
            op::GLOBAL_SET => {
                let g = imm!() as usize;
                mach.globals[g] = pop!();
            }
            op::I32_LOAD..=op::F64_LOAD | op::I32_LOAD8_U => {
                imm!();
                let off = imm!();
                let addr = pop!() as u32;
                let (_, t) = crate::wasm::mem_access(opc).expect("load");
                match mach.memory.load(mem_kind(opc), addr, off) {
                    Ok(v) => push!(v, t),
                    Err(k) => trap!(k, pc),
                }
            }
            op::I32_STORE..=op::I32_STORE8 => {
                imm!();
                let off = imm!();
                let v = pop!();
                let addr = pop!() as u32;
                if let Err(k) = mach.memory.store(mem_kind(opc), addr, off, v) {
                    trap!(k, pc);
                }
            }
            op::MEMORY_SIZE => {
                r.u8().expect("memory index");
                push!(mach.memory.pages() as u64, ValType::I32);
            }
            op::MEMORY_GROW => {
                r.u8().expect("memory index");
                let d = pop!() as u32;
                let old = mach.memory.grow(d);
                push!(old as u64, ValType::I32);
            }
            op::I32_CONST => push!(r.i32().expect("immediate") as u32 as u64, ValType::I32),
            op::I64_CONST => push!(r.i64().expect("immediate") as u64, ValType::I64),
            op::F32_CONST => push!(r.f32_bits().expect("immediate") as u64, ValType::F32),
            op::F64_CONST => push!(r.f64_bits().expect("immediate"), ValType::F64),
            op::REF_NULL => {
                r.u8().expect("reftype");
                push!(0, ValType::Ref);
            }
            op::REF_IS_NULL => {
                let v = pop!();
                push!((v == 0) as u64, ValType::I32);
            }
            _ => {
                let n = values::classify(opc).expect("validated opcode");
                let (a, b) = if n.arity() == 2 {
                    let b = pop!();
                    (pop!(), b)
                } else {
                    (pop!(), 0)
                };
                match values::eval(n, a, b) {
                    Ok(v) => push!(v, numeric_result(n)),
                    Err(k) => trap!(k, pc),
                }
            }
        }
        ip = (r.pos() - base) as u32;
    }
    let result = m.types[f.type_idx as usize].result.map(|_| mach.stack.values[sp - 1]);
    ip = end;
    save!();
    Event::Return(result)
}
