//! The compiler's abstract state: per-slot knowledge, the register file, and
//! the snapshot/merge machinery used at control-flow joins.
//!
//! Slots are locals followed by the operand stack. Each live slot knows
//! whether its value is in its frame slot, which register (if any) caches it,
//! its constant value (if known) and whether its tag byte is in the frame.

use alloc::vec;
use alloc::vec::Vec;

use crate::visa::{Instr, Reg, NUM_REGS};
use crate::wasm::ValType;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Spill {
    NotStored,
    /// The value is in frame slot `n`. In the live state `n` is always the
    /// slot's own index; branch views may point elsewhere.
    StoredAt(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AbstractValue {
    pub spill: Spill,
    pub reg: Option<Reg>,
    pub konst: Option<u64>,
    pub tag_stored: bool,
    pub vtype: ValType,
}

impl AbstractValue {
    pub fn stored(vtype: ValType, slot: u32) -> Self {
        AbstractValue { spill: Spill::StoredAt(slot), reg: None, konst: None, tag_stored: false, vtype }
    }

    pub fn konst(vtype: ValType, k: u64) -> Self {
        AbstractValue { spill: Spill::NotStored, reg: None, konst: Some(k), tag_stored: false, vtype }
    }

    pub fn in_reg(vtype: ValType, r: Reg) -> Self {
        AbstractValue { spill: Spill::NotStored, reg: Some(r), konst: None, tag_stored: false, vtype }
    }

    pub fn is_stored_at(&self, i: u32) -> bool {
        self.spill == Spill::StoredAt(i)
    }

    pub fn materializable(&self) -> bool {
        self.spill != Spill::NotStored || self.reg.is_some() || self.konst.is_some()
    }
}

/// Which slots must have their tags kept in the frame at all times.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EagerTags {
    pub locals: bool,
    pub operands: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct RegEntry {
    slots: Vec<u32>,
    stamp: u64,
}

/// Frozen copy of slot knowledge and register stamps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateSnapshot {
    pub slots: Vec<AbstractValue>,
    stamps: Vec<u64>,
}

impl StateSnapshot {
    pub fn from_slots(slots: Vec<AbstractValue>) -> Self {
        StateSnapshot { slots, stamps: vec![0; 2 * NUM_REGS as usize] }
    }
}

#[derive(Clone, Debug)]
pub struct AbstractState {
    pub slots: Vec<AbstractValue>,
    pub num_locals: u32,
    regs: Vec<RegEntry>,
    clock: u64,
    pub multi_reg: bool,
}

/// Sink for emitted instructions.
pub trait Emit {
    fn put(&mut self, i: Instr);
}

impl Emit for Vec<Instr> {
    fn put(&mut self, i: Instr) {
        self.push(i)
    }
}

impl Emit for crate::visa::CodeBuffer {
    fn put(&mut self, i: Instr) {
        self.emit(i)
    }
}

/// Instructions that store constant `k` of type `t` into frame slot `slot`.
pub fn store_const(out: &mut impl Emit, slot: u32, t: ValType, k: u64, imm_ok: bool) {
    use crate::values::Width;
    if imm_ok {
        let (fits, w) = match t {
            ValType::I32 | ValType::F32 => (true, Width::W32),
            _ => (k as i64 >= i32::MIN as i64 && k as i64 <= i32::MAX as i64, Width::W64),
        };
        if fits {
            out.put(Instr::StoreSlotImm { slot, imm: k as u32 as i32, w });
            return;
        }
    }
    let s = if t.is_float() { Reg::FSCRATCH } else { Reg::SCRATCH };
    out.put(Instr::MovRI { dst: s, imm: k });
    out.put(Instr::StoreSlot { src: s, slot });
}

pub fn reg_class_float(t: ValType) -> bool {
    t.is_float()
}

impl AbstractState {
    pub fn new(num_locals: u32, multi_reg: bool) -> Self {
        AbstractState {
            slots: Vec::new(),
            num_locals,
            regs: vec![RegEntry::default(); 2 * NUM_REGS as usize],
            clock: 0,
            multi_reg,
        }
    }

    pub fn height(&self) -> u32 {
        self.slots.len() as u32
    }

    pub fn is_local(&self, i: u32) -> bool {
        i < self.num_locals
    }

    pub fn push(&mut self, v: AbstractValue) -> u32 {
        let i = self.height();
        self.slots.push(AbstractValue { reg: None, ..v });
        if let Some(r) = v.reg {
            self.bind(i, r);
        }
        i
    }

    pub fn pop(&mut self) -> AbstractValue {
        let i = self.height() - 1;
        self.unbind(i);
        self.slots.pop().expect("operand")
    }

    pub fn top(&self) -> &AbstractValue {
        self.slots.last().expect("operand")
    }

    /// Slots cached in `r`.
    pub fn reg_slots(&self, r: Reg) -> &[u32] {
        &self.regs[r.dense()].slots
    }

    pub fn reg_is_free(&self, r: Reg) -> bool {
        self.regs[r.dense()].slots.is_empty()
    }

    /// Makes `r` cache slot `i` in addition to its other slots.
    pub fn bind(&mut self, i: u32, r: Reg) {
        debug_assert!(r.index() < NUM_REGS);
        if self.slots[i as usize].reg == Some(r) {
            return;
        }
        self.unbind(i);
        self.clock += 1;
        let e = &mut self.regs[r.dense()];
        e.slots.push(i);
        e.stamp = self.clock;
        self.slots[i as usize].reg = Some(r);
    }

    pub fn unbind(&mut self, i: u32) {
        if let Some(r) = self.slots[i as usize].reg.take() {
            let e = &mut self.regs[r.dense()];
            e.slots.retain(|&s| s != i);
        }
    }

    /// Drops every register binding (after a call clobbers all registers).
    pub fn clear_regs(&mut self) {
        for e in &mut self.regs {
            e.slots.clear();
        }
        for s in &mut self.slots {
            s.reg = None;
        }
    }

    /// Stores slot `i`'s value into its frame slot unless it is already there.
    pub fn spill(&mut self, i: u32, out: &mut impl Emit, imm_ok: bool) {
        let v = self.slots[i as usize];
        if v.is_stored_at(i) {
            return;
        }
        if let Some(r) = v.reg {
            out.put(Instr::StoreSlot { src: r, slot: i });
        } else if let Some(k) = v.konst {
            store_const(out, i, v.vtype, k, imm_ok);
        } else {
            unreachable!("slot {i} has no location");
        }
        self.slots[i as usize].spill = Spill::StoredAt(i);
    }

    /// Spills the slots cached in `r` that have no other location and frees `r`.
    pub fn evict(&mut self, r: Reg, out: &mut impl Emit) {
        let slots = core::mem::take(&mut self.regs[r.dense()].slots);
        for &i in &slots {
            let v = self.slots[i as usize];
            if !v.is_stored_at(i) && v.konst.is_none() {
                out.put(Instr::StoreSlot { src: r, slot: i });
                self.slots[i as usize].spill = Spill::StoredAt(i);
            }
            self.slots[i as usize].reg = None;
        }
    }

    fn needs_spill_on_evict(&self, r: Reg) -> bool {
        self.reg_slots(r).iter().any(|&i| {
            let v = &self.slots[i as usize];
            !v.is_stored_at(i) && v.konst.is_none()
        })
    }

    /// Returns a free register of the requested class, evicting one if needed.
    ///
    /// Free registers are taken lowest-numbered first. Otherwise the least
    /// recently bound register whose slots are all stored elsewhere is chosen,
    /// and failing that the least recently bound one, spilling its slots.
    pub fn alloc_reg(&mut self, float: bool, avoid: &[Reg], out: &mut impl Emit) -> Reg {
        let cands = (0..NUM_REGS).map(|i| if float { Reg::float(i) } else { Reg::int(i) }).filter(|r| !avoid.contains(r));
        let mut best: Option<(bool, u64, Reg)> = None;
        for r in cands {
            if self.reg_is_free(r) {
                return r;
            }
            let key = (self.needs_spill_on_evict(r), self.regs[r.dense()].stamp, r);
            if best.is_none_or(|b| (key.0, key.1) < (b.0, b.1)) {
                best = Some(key);
            }
        }
        let (_, _, r) = best.expect("avoid set leaves a register");
        self.evict(r, out);
        r
    }

    /// Ensures slot `i` is in a register and returns it.
    pub fn to_reg(&mut self, i: u32, avoid: &[Reg], out: &mut impl Emit) -> Reg {
        let v = self.slots[i as usize];
        if let Some(r) = v.reg {
            return r;
        }
        let r = self.alloc_reg(v.vtype.is_float(), avoid, out);
        self.load_into(i, r, out);
        self.bind(i, r);
        r
    }

    /// Emits code placing slot `i`'s value in `r` without changing bindings.
    pub fn load_into(&self, i: u32, r: Reg, out: &mut impl Emit) {
        let v = self.slots[i as usize];
        if let Some(s) = v.reg {
            if s != r {
                out.put(Instr::MovRR { dst: r, src: s });
            }
        } else if let Some(k) = v.konst {
            out.put(Instr::MovRI { dst: r, imm: k });
        } else if let Spill::StoredAt(n) = v.spill {
            out.put(Instr::LoadSlot { dst: r, slot: n });
        } else {
            unreachable!("slot {i} has no location");
        }
    }

    /// True if `r` caches only slot `i`, so clobbering it loses nothing else.
    pub fn reg_owned_by(&self, r: Reg, i: u32) -> bool {
        let s = self.reg_slots(r);
        s.len() == 1 && s[0] == i
    }

    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot { slots: self.slots.clone(), stamps: self.regs.iter().map(|e| e.stamp).collect() }
    }

    /// Replaces the state with `s`. `s` must not contain relocated views.
    pub fn restore(&mut self, s: &StateSnapshot) {
        for e in &mut self.regs {
            e.slots.clear();
        }
        self.slots.clear();
        self.slots.extend_from_slice(&s.slots);
        for (i, v) in s.slots.iter().enumerate() {
            debug_assert!(matches!(v.spill, Spill::NotStored) || v.is_stored_at(i as u32));
            if let Some(r) = v.reg {
                self.regs[r.dense()].slots.push(i as u32);
            }
        }
        for (e, &st) in self.regs.iter_mut().zip(&s.stamps) {
            e.stamp = st;
            self.clock = self.clock.max(st);
        }
    }

    /// Checks the slot/register bijection and materializability.
    pub fn check(&self, track_consts: bool) -> Result<(), &'static str> {
        for (i, v) in self.slots.iter().enumerate() {
            if !v.materializable() {
                return Err("slot without location");
            }
            if !track_consts && v.konst.is_some() {
                return Err("constant tracked with constant tracking disabled");
            }
            if let Spill::StoredAt(n) = v.spill {
                if n != i as u32 {
                    return Err("live slot stored elsewhere");
                }
            }
            if let Some(r) = v.reg {
                if r.is_float() != v.vtype.is_float() {
                    return Err("register class mismatch");
                }
                if !self.regs[r.dense()].slots.contains(&(i as u32)) {
                    return Err("slot names a register that does not cache it");
                }
            }
        }
        for (d, e) in self.regs.iter().enumerate() {
            if !self.multi_reg && e.slots.len() > 1 {
                return Err("register caches several slots without multi-register allocation");
            }
            for &s in &e.slots {
                if self.slots.get(s as usize).and_then(|v| v.reg) != Some(Reg::from_dense(d)) {
                    return Err("register caches a slot that does not name it");
                }
            }
        }
        Ok(())
    }
}

fn fresh_reg(used: &[bool], float: bool) -> Option<Reg> {
    (0..NUM_REGS).map(|i| if float { Reg::float(i) } else { Reg::int(i) }).find(|r| !used[r.dense()])
}

fn apply_eager(m: &mut [AbstractValue], num_locals: u32, eager: EagerTags) {
    for (i, v) in m.iter_mut().enumerate() {
        let local = (i as u32) < num_locals;
        if (local && eager.locals) || (!local && eager.operands) {
            v.tag_stored = true;
        }
    }
}

/// Merge target derived from a single arrival whose successors are unknown:
/// constants are dropped and each register caches at most one slot.
pub fn normalize(s: &[AbstractValue], num_locals: u32, eager: EagerTags) -> StateSnapshot {
    let mut used = vec![false; 2 * NUM_REGS as usize];
    let mut m: Vec<AbstractValue> = Vec::with_capacity(s.len());
    let mut homeless = Vec::new();
    for (i, v) in s.iter().enumerate() {
        let mut t = AbstractValue { spill: Spill::NotStored, reg: None, konst: None, tag_stored: v.tag_stored, vtype: v.vtype };
        match v.reg {
            Some(r) if !used[r.dense()] => {
                used[r.dense()] = true;
                t.reg = Some(r);
            }
            _ => {
                if v.is_stored_at(i as u32) {
                    t.spill = Spill::StoredAt(i as u32);
                } else {
                    homeless.push(i);
                }
            }
        }
        m.push(t);
    }
    place_homeless(&mut m, &homeless, &mut used);
    apply_eager(&mut m, num_locals, eager);
    StateSnapshot::from_slots(m)
}

fn place_homeless(m: &mut [AbstractValue], homeless: &[usize], used: &mut [bool]) {
    for &i in homeless {
        match fresh_reg(used, m[i].vtype.is_float()) {
            Some(r) => {
                used[r.dense()] = true;
                m[i].reg = Some(r);
            }
            None => m[i].spill = Spill::StoredAt(i as u32),
        }
    }
}

/// Merge target for exactly two arrivals: knowledge both agree on survives.
pub fn meet(a: &[AbstractValue], b: &[AbstractValue], num_locals: u32, eager: EagerTags) -> StateSnapshot {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    // a register survives only if it caches the same slots in both arrivals
    let mut same = vec![true; 2 * NUM_REGS as usize];
    for (x, y) in a.iter().zip(b) {
        if x.reg != y.reg {
            for r in [x.reg, y.reg].into_iter().flatten() {
                same[r.dense()] = false;
            }
        }
    }
    let mut used = vec![false; 2 * NUM_REGS as usize];
    let mut m: Vec<AbstractValue> = Vec::with_capacity(n);
    let mut homeless = Vec::new();
    for i in 0..n {
        let (x, y) = (&a[i], &b[i]);
        let mut t = AbstractValue {
            spill: Spill::NotStored,
            reg: None,
            konst: None,
            tag_stored: x.tag_stored && y.tag_stored,
            vtype: x.vtype,
        };
        if x.konst.is_some() && x.konst == y.konst {
            t.konst = x.konst;
        }
        if x.is_stored_at(i as u32) && y.is_stored_at(i as u32) {
            t.spill = Spill::StoredAt(i as u32);
        }
        if let Some(r) = x.reg {
            if same[r.dense()] {
                used[r.dense()] = true;
                t.reg = Some(r);
            }
        }
        if !t.materializable() {
            homeless.push(i);
        }
        m.push(t);
    }
    place_homeless(&mut m, &homeless, &mut used);
    apply_eager(&mut m, num_locals, eager);
    StateSnapshot::from_slots(m)
}

/// Makes a single-arrival view usable as a live state: relocated values
/// get their own location. Everything else is kept.
pub fn settle(s: &[AbstractValue]) -> StateSnapshot {
    let mut used = vec![false; 2 * NUM_REGS as usize];
    for v in s {
        if let Some(r) = v.reg {
            used[r.dense()] = true;
        }
    }
    let mut m = s.to_vec();
    let mut homeless = Vec::new();
    for (i, v) in m.iter_mut().enumerate() {
        if let Spill::StoredAt(n) = v.spill {
            if n != i as u32 {
                v.spill = Spill::NotStored;
                v.tag_stored = false;
                if v.reg.is_none() && v.konst.is_none() {
                    homeless.push(i);
                }
            }
        }
    }
    place_homeless(&mut m, &homeless, &mut used);
    StateSnapshot::from_slots(m)
}

/// Code that brings machine state described by `s` into the state `m`,
/// leaving `s` itself untouched.
pub fn conform(s: &[AbstractValue], m: &[AbstractValue], imm_ok: bool, out: &mut impl Emit) {
    debug_assert_eq!(s.len(), m.len());
    // 1. frame stores, reading registers before any move clobbers them
    for (i, (x, t)) in s.iter().zip(m).enumerate() {
        let i = i as u32;
        if t.is_stored_at(i) && !x.is_stored_at(i) {
            if let Some(r) = x.reg {
                out.put(Instr::StoreSlot { src: r, slot: i });
            } else if let Some(k) = x.konst {
                store_const(out, i, x.vtype, k, imm_ok);
            } else if let Spill::StoredAt(n) = x.spill {
                let sc = if x.vtype.is_float() { Reg::FSCRATCH } else { Reg::SCRATCH };
                out.put(Instr::LoadSlot { dst: sc, slot: n });
                out.put(Instr::StoreSlot { src: sc, slot: i });
            }
        }
    }
    // 2. tags
    for (i, (x, t)) in s.iter().zip(m).enumerate() {
        if t.tag_stored && !x.tag_stored {
            out.put(Instr::StoreTag { slot: i as u32, tag: t.vtype.tag() });
        }
    }
    // 3. register-to-register moves as a parallel copy
    let mut moves: Vec<(Reg, Reg)> = Vec::new();
    let mut late: Vec<(Reg, usize)> = Vec::new();
    let mut done = vec![false; 2 * NUM_REGS as usize];
    for (i, t) in m.iter().enumerate() {
        let Some(r) = t.reg else { continue };
        if done[r.dense()] {
            continue;
        }
        done[r.dense()] = true;
        // any slot sharing `r` in the target holds the same value
        let src = (i..m.len()).filter(|&j| m[j].reg == Some(r)).find_map(|j| s[j].reg);
        match src {
            Some(q) if q == r => {}
            Some(q) => moves.push((r, q)),
            None => late.push((r, i)),
        }
    }
    parallel_moves(&mut moves, out);
    // 4. constants and frame loads into registers no move reads any more
    for (r, i) in late {
        let x = &s[i];
        if let Some(k) = x.konst {
            out.put(Instr::MovRI { dst: r, imm: k });
        } else if let Spill::StoredAt(n) = x.spill {
            out.put(Instr::LoadSlot { dst: r, slot: n });
        } else {
            unreachable!("slot {i} has no source location");
        }
    }
}

fn parallel_moves(moves: &mut Vec<(Reg, Reg)>, out: &mut impl Emit) {
    while !moves.is_empty() {
        let ready = (0..moves.len()).find(|&k| {
            let dst = moves[k].0;
            !moves.iter().any(|&(_, src)| src == dst)
        });
        match ready {
            Some(k) => {
                let (d, s) = moves.remove(k);
                out.put(Instr::MovRR { dst: d, src: s });
            }
            None => {
                // every destination is still read: save one through scratch
                let d = moves[0].0;
                let sc = d.scratch_for();
                out.put(Instr::MovRR { dst: sc, src: d });
                for mv in moves.iter_mut() {
                    if mv.1 == d {
                        mv.1 = sc;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wasm::ValType::*;
    use alloc::vec::Vec;

    fn r(i: u8) -> Reg {
        Reg::int(i)
    }

    fn full_state(stored: bool) -> AbstractState {
        let mut s = AbstractState::new(0, true);
        for i in 0..8u8 {
            let mut v = AbstractValue::in_reg(I32, r(i));
            if stored && i == 5 {
                v.spill = Spill::StoredAt(i as u32);
            }
            s.push(v);
        }
        s
    }

    #[test]
    fn free_register_is_lowest() {
        let mut s = AbstractState::new(0, true);
        s.push(AbstractValue::in_reg(I32, r(0)));
        let mut out = Vec::new();
        assert_eq!(s.alloc_reg(false, &[], &mut out), r(1));
        assert!(out.is_empty());
    }

    #[test]
    fn eviction_prefers_stored_slot() {
        let mut s = full_state(true);
        let mut out = Vec::new();
        let got = s.alloc_reg(false, &[], &mut out);
        assert_eq!(got, r(5));
        assert!(out.is_empty());
        s.check(true).unwrap();
    }

    #[test]
    fn eviction_spills_least_recent() {
        let mut s = full_state(false);
        let mut out = Vec::new();
        let got = s.alloc_reg(false, &[], &mut out);
        assert_eq!(got, r(0));
        assert_eq!(out, [Instr::StoreSlot { src: r(0), slot: 0 }]);
        assert!(s.slots[0].is_stored_at(0));
    }

    #[test]
    fn snapshot_is_independent() {
        let mut s = AbstractState::new(2, true);
        s.push(AbstractValue::stored(I32, 0));
        s.push(AbstractValue::in_reg(I32, r(3)));
        let snap = s.snapshot();
        assert_eq!(snap.slots.len(), 2);
        s.pop();
        s.push(AbstractValue::konst(I32, 9));
        assert_eq!(snap.slots[1].reg, Some(r(3)));
        s.restore(&snap);
        assert_eq!(s.slots[1].reg, Some(r(3)));
        assert_eq!(s.reg_slots(r(3)), &[1]);
    }

    #[test]
    fn meet_keeps_equal_constants() {
        let a = [AbstractValue::konst(I32, 1)];
        let m = meet(&a, &a, 0, EagerTags::default());
        assert_eq!(m.slots[0].konst, Some(1));
        let mut out = Vec::new();
        conform(&a, &m.slots, true, &mut out);
        assert!(out.is_empty());
    }

    #[test]
    fn meet_demotes_different_constants_to_register() {
        let a = [AbstractValue::konst(I32, 1)];
        let b = [AbstractValue::konst(I32, 2)];
        let m = meet(&a, &b, 0, EagerTags::default());
        assert_eq!(m.slots[0].konst, None);
        assert_eq!(m.slots[0].reg, Some(r(0)));
        for s in [&a, &b] {
            let mut out = Vec::new();
            conform(s, &m.slots, true, &mut out);
            assert_eq!(out.len(), 1);
            assert!(matches!(out[0], Instr::MovRI { .. }));
        }
    }

    #[test]
    fn swap_cycle_uses_scratch() {
        let s = [AbstractValue::in_reg(I32, r(0)), AbstractValue::in_reg(I32, r(1))];
        let m = [AbstractValue::in_reg(I32, r(1)), AbstractValue::in_reg(I32, r(0))];
        let mut out = Vec::new();
        conform(&s, &m, true, &mut out);
        assert_eq!(out.len(), 3);
        // simulate the moves
        let mut regs = [10u64, 20, 0, 0, 0, 0, 0, 0, 0];
        for i in &out {
            if let Instr::MovRR { dst, src } = i {
                regs[dst.index() as usize] = regs[src.index() as usize];
            }
        }
        assert_eq!((regs[0], regs[1]), (20, 10));
    }

    #[test]
    fn normalize_splits_aliases() {
        let s = [AbstractValue::in_reg(I32, r(2)), AbstractValue::in_reg(I32, r(2))];
        let m = normalize(&s, 0, EagerTags::default());
        assert_eq!(m.slots[0].reg, Some(r(2)));
        assert_eq!(m.slots[1].reg, Some(r(0)));
    }
}
