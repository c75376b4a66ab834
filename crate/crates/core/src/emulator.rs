//! Executes vISA code over the shared value stack.
//!
//! Each retired instruction adds its cost to the counters. Execution is
//! deterministic: the only inputs are the machine state and the program.

use crate::compiler::CompiledFunction;
use crate::interp::Event;
use crate::runtime::Machine;
use crate::values::{self, Width};
use crate::visa::{Instr, Opnd, Reg};
use crate::wasm::WasmModule;

fn opnd(regs: &[u64; 32], o: Opnd, w: Width) -> u64 {
    match o {
        Opnd::Reg(r) => regs[r.0 as usize],
        Opnd::Imm(i) => w.norm(i as i64 as u64),
    }
}

/// Runs the top frame, which must be compiled, until it calls, returns,
/// traps or runs out of fuel. With `watch_loops` it also stops on arriving
/// at a loop header.
pub fn run(mach: &mut Machine, m: &WasmModule, cf: &CompiledFunction, watch_loops: bool, fuel: &mut u64) -> Event {
    let fr = *mach.top();
    let vfp = fr.vfp() as usize;
    let code = &cf.program.instrs;
    let mut pc = fr.ip() as usize;

    macro_rules! save {
        () => {
            mach.frames.last_mut().expect("active frame").set_ip(pc as u32)
        };
    }
    macro_rules! r {
        ($r:expr) => {
            mach.regs[$r.0 as usize]
        };
    }
    // Raises `$k` at the current instruction, or latches it and continues
    // at the instruction's exit stub.
    macro_rules! fault {
        ($k:expr, $f:expr) => {{
            match $f {
                Some(l) => {
                    mach.fault = Some(($k, pc as u32));
                    pc = cf.program.target(*l);
                    continue;
                }
                None => {
                    save!();
                    return Event::Trap { kind: $k, pc: pc as u32 };
                }
            }
        }};
    }

    loop {
        if watch_loops && !mach.skip_header && cf.is_loop_header[pc] {
            save!();
            return Event::LoopHeader;
        }
        mach.skip_header = false;
        let ins = &code[pc];
        let cost = ins.cost();
        if *fuel < cost {
            save!();
            return Event::OutOfFuel;
        }
        *fuel -= cost;
        mach.counters.instrs_retired += 1;
        mach.counters.cost_units += cost;
        let mut next = pc + 1;
        match ins {
            Instr::MovRR { dst, src } => r!(dst) = r!(src),
            Instr::MovRI { dst, imm } => r!(dst) = *imm,
            Instr::LoadSlot { dst, slot } => r!(dst) = mach.stack.values[vfp + *slot as usize],
            Instr::StoreSlot { src, slot } => {
                mach.stack.values[vfp + *slot as usize] = r!(src);
                mach.counters.slot_stores_executed += 1;
            }
            Instr::StoreSlotImm { slot, imm, w } => {
                mach.stack.values[vfp + *slot as usize] = w.norm(*imm as i64 as u64);
                mach.counters.slot_stores_executed += 1;
            }
            Instr::StoreTag { slot, tag } => {
                mach.stack.tags[vfp + *slot as usize] = *tag;
                mach.counters.tag_stores_executed += 1;
            }
            Instr::Alu { op, w, dst, a, b, fault } => {
                let y = opnd(&mach.regs, *b, *w);
                match values::int_op(*op, *w, r!(a), y) {
                    Ok(v) => r!(dst) = v,
                    Err(k) => fault!(k, fault),
                }
            }
            Instr::FAlu { op, w, dst, a, b } => r!(dst) = values::float_op(*op, *w, r!(a), r!(b)),
            Instr::FUn { op, w, dst, a } => r!(dst) = values::float_unop(*op, *w, r!(a)),
            Instr::Cvt { op, dst, src, fault } => match values::convert(*op, r!(src)) {
                Ok(v) => r!(dst) = v,
                Err(k) => fault!(k, fault),
            },
            Instr::Cmp { w, a, b } => mach.cmp = Some((*w, r!(a), opnd(&mach.regs, *b, *w))),
            Instr::SetCc { cond, dst } => {
                let (w, x, y) = mach.cmp.expect("set.cc after cmp");
                r!(dst) = values::cond(*cond, w, x, y) as u64;
            }
            Instr::BrCc { cond, w, a, b, target } => {
                if values::cond(*cond, *w, r!(a), opnd(&mach.regs, *b, *w)) {
                    next = cf.program.target(*target);
                }
            }
            Instr::Jmp { target } => next = cf.program.target(*target),
            Instr::BrTable { idx, targets } => {
                let i = (r!(idx) as u32 as usize).min(targets.len() - 1);
                next = cf.program.target(targets[i]);
            }
            Instr::Call { func, h } | Instr::HostCall { import: func, h } => {
                let n = m.func_type(*func).expect("validated call").params.len() as u32;
                let at = pc as u32;
                pc = next;
                save!();
                return Event::Call { func: *func, args: vfp as u32 + h - n, pc: at };
            }
            Instr::Ret => {
                let result = m.types[m.defined(cf.func_index).expect("defined").type_idx as usize].result;
                save!();
                return Event::Return(result.map(|t| mach.regs[if t.is_float() { Reg::X0.0 } else { Reg::R0.0 } as usize]));
            }
            Instr::Load { kind, dst, addr, offset, fault } => match mach.memory.load(*kind, r!(addr) as u32, *offset) {
                Ok(v) => r!(dst) = v,
                Err(k) => fault!(k, fault),
            },
            Instr::Store { kind, src, addr, offset, fault } => {
                let v = r!(src);
                if let Err(k) = mach.memory.store(*kind, r!(addr) as u32, *offset, v) {
                    fault!(k, fault);
                }
            }
            Instr::MemSize { dst } => r!(dst) = mach.memory.pages() as u64,
            Instr::MemGrow { dst, src } => {
                let d = r!(src) as u32;
                r!(dst) = mach.memory.grow(d) as u64;
            }
            Instr::LoadGlobal { dst, idx } => r!(dst) = mach.globals[*idx as usize],
            Instr::StoreGlobal { src, idx } => mach.globals[*idx as usize] = r!(src),
            Instr::Trap { kind } => {
                let (k, at) = match kind {
                    Some(k) => (*k, pc as u32),
                    None => mach.fault.take().expect("latched fault"),
                };
                save!();
                return Event::Trap { kind: k, pc: at };
            }
        }
        pc = next;
    }
}
