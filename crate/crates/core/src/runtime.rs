//! The execution substrate shared by both tiers.
//!
//! A frame is four metadata words plus `frame_slots` value slots. Values
//! live in one contiguous region of 8-byte slots and each slot has a one-byte
//! tag in a parallel region. The metadata words live in their own array
//! (`Machine::frames`), indexed by activation depth:
//!
//! | word | interpreter frame        | compiled frame         |
//! |------|--------------------------|------------------------|
//! | 0    | function index           | function index         |
//! | 1    | bytecode pc (IP)         | vISA pc                |
//! | 2    | sidetable position (STP) | 0                      |
//! | 3    | flags                    | flags                  |
//!
//! Flags: bit 0 marks a compiled frame, bit 1 requests a tier-down at the
//! next safepoint, bits 8..24 hold the hotness counter and bits 32..64 the
//! frame's first slot (VFP).

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::compiler::{CompiledFunction, Tagging};
use crate::values::{TrapKind, Width};
use crate::visa::MemKind;
use crate::wasm::{ValType, WasmFunction, WasmModule, MAX_PAGES, PAGE_SIZE};

pub const META_WORDS: usize = 4;

pub const FLAG_JIT: u64 = 1;
pub const FLAG_TIER_DOWN: u64 = 2;
const HOT_SHIFT: u32 = 8;
const HOT_MAX: u64 = 0xffff;
const VFP_SHIFT: u32 = 32;

/// Default hotness threshold for tier-up.
pub const DEFAULT_HOT_THRESHOLD: u32 = 10;

/// The four metadata words of one activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Frame(pub [u64; META_WORDS]);

impl Frame {
    pub fn new(func: u32, vfp: u32, jit: bool) -> Frame {
        Frame([func as u64, 0, 0, ((vfp as u64) << VFP_SHIFT) | jit as u64])
    }

    pub fn func(&self) -> u32 {
        self.0[0] as u32
    }

    pub fn ip(&self) -> u32 {
        self.0[1] as u32
    }

    pub fn set_ip(&mut self, ip: u32) {
        self.0[1] = ip as u64;
    }

    pub fn stp(&self) -> u32 {
        self.0[2] as u32
    }

    pub fn set_stp(&mut self, stp: u32) {
        self.0[2] = stp as u64;
    }

    pub fn flags(&self) -> u64 {
        self.0[3]
    }

    pub fn is_jit(&self) -> bool {
        self.0[3] & FLAG_JIT != 0
    }

    pub fn set_jit(&mut self, jit: bool) {
        self.0[3] = (self.0[3] & !FLAG_JIT) | jit as u64;
    }

    pub fn tier_down_requested(&self) -> bool {
        self.0[3] & FLAG_TIER_DOWN != 0
    }

    pub fn request_tier_down(&mut self, on: bool) {
        self.0[3] = (self.0[3] & !FLAG_TIER_DOWN) | if on { FLAG_TIER_DOWN } else { 0 };
    }

    pub fn hotness(&self) -> u32 {
        ((self.0[3] >> HOT_SHIFT) & HOT_MAX) as u32
    }

    pub fn set_hotness(&mut self, h: u32) {
        let h = (h as u64).min(HOT_MAX);
        self.0[3] = (self.0[3] & !(HOT_MAX << HOT_SHIFT)) | (h << HOT_SHIFT);
    }

    pub fn vfp(&self) -> u32 {
        (self.0[3] >> VFP_SHIFT) as u32
    }
}

/// Bumps the frame's hotness counter, saturating, and reports whether it
/// has reached `threshold`. A threshold above the counter's range never fires.
pub fn hotness_tick(frame: &mut Frame, threshold: u32) -> bool {
    let h = frame.hotness().saturating_add(1);
    frame.set_hotness(h);
    threshold as u64 <= HOT_MAX && frame.hotness() >= threshold
}

/// Words occupied by a frame of `f`, metadata included.
pub fn frame_words(f: &WasmFunction) -> usize {
    META_WORDS + f.frame_slots() as usize
}

/// Words a compiled frame of `cf` touches: metadata plus every slot its
/// code addresses or passes to a callee.
pub fn jit_frame_words(cf: &CompiledFunction) -> usize {
    use crate::visa::Instr;
    let mut slots = cf.frame_slots;
    for i in &cf.program.instrs {
        let s = match i {
            Instr::LoadSlot { slot, .. } | Instr::StoreSlot { slot, .. } | Instr::StoreSlotImm { slot, .. } | Instr::StoreTag { slot, .. } => slot + 1,
            Instr::Call { h, .. } | Instr::HostCall { h, .. } => *h,
            _ => 0,
        };
        slots = slots.max(s);
    }
    META_WORDS + slots as usize
}

/// Value and tag regions.
#[derive(Clone, Debug, Default)]
pub struct ValueStack {
    pub values: Vec<u64>,
    pub tags: Vec<u8>,
}

impl ValueStack {
    /// Grows both regions to at least `n` slots.
    pub fn ensure(&mut self, n: usize) {
        if self.values.len() < n {
            self.values.resize(n, 0);
            self.tags.resize(n, 0);
        }
    }

    pub fn capacity(&self) -> usize {
        self.values.len()
    }

    pub fn write(&mut self, i: u32, v: u64, t: ValType) {
        self.values[i as usize] = v;
        self.tags[i as usize] = t.tag();
    }
}

/// Single linear memory, bounds-checked on every access.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Memory {
    pub bytes: Vec<u8>,
    pub max_pages: u32,
}

impl Memory {
    pub fn new(min: u32, max: Option<u32>) -> Memory {
        Memory { bytes: vec![0; min as usize * PAGE_SIZE], max_pages: max.unwrap_or(MAX_PAGES).min(MAX_PAGES) }
    }

    pub fn pages(&self) -> u32 {
        (self.bytes.len() / PAGE_SIZE) as u32
    }

    /// Returns the old page count, or `u32::MAX` if the memory cannot grow.
    pub fn grow(&mut self, delta: u32) -> u32 {
        let old = self.pages();
        match old.checked_add(delta) {
            Some(n) if n <= self.max_pages => {
                self.bytes.resize(n as usize * PAGE_SIZE, 0);
                old
            }
            _ => u32::MAX,
        }
    }

    fn range(&self, addr: u32, offset: u32, size: u32) -> Result<core::ops::Range<usize>, TrapKind> {
        let start = addr as u64 + offset as u64;
        let end = start + size as u64;
        if end > self.bytes.len() as u64 {
            return Err(TrapKind::OutOfBounds);
        }
        Ok(start as usize..end as usize)
    }

    pub fn load(&self, kind: MemKind, addr: u32, offset: u32) -> Result<u64, TrapKind> {
        let r = self.range(addr, offset, kind.size())?;
        let b = &self.bytes[r];
        let mut w = [0u8; 8];
        w[..b.len()].copy_from_slice(b);
        Ok(u64::from_le_bytes(w))
    }

    pub fn store(&mut self, kind: MemKind, addr: u32, offset: u32, v: u64) -> Result<(), TrapKind> {
        let r = self.range(addr, offset, kind.size())?;
        let n = r.len();
        self.bytes[r].copy_from_slice(&v.to_le_bytes()[..n]);
        Ok(())
    }
}

/// Memory kind of a load or store opcode.
pub fn mem_kind(opc: u8) -> MemKind {
    use crate::wasm::opcodes as op;
    match opc {
        op::I32_LOAD | op::I32_STORE => MemKind::I32,
        op::I64_LOAD | op::I64_STORE => MemKind::I64,
        op::F32_LOAD | op::F32_STORE => MemKind::F32,
        op::F64_LOAD | op::F64_STORE => MemKind::F64,
        _ => MemKind::U8,
    }
}

/// Dynamic counters accumulated by both tiers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// Bytecodes executed by the interpreter.
    pub bytecodes: u64,
    /// vISA instructions retired.
    pub instrs_retired: u64,
    /// vISA cost units.
    pub cost_units: u64,
    /// `store.tag` instructions retired.
    pub tag_stores_executed: u64,
    /// Slot stores retired by compiled code.
    pub slot_stores_executed: u64,
}

/// Everything a tier reads or writes while running.
#[derive(Clone, Debug, Default)]
pub struct Machine {
    pub stack: ValueStack,
    pub frames: Vec<Frame>,
    /// Stack top of the running interpreter frame (absolute slot index).
    pub sp: u32,
    pub memory: Memory,
    pub globals: Vec<u64>,
    /// r0..r8 at 0..9, x0..x8 at 16..25.
    pub regs: [u64; 32],
    /// Width and operands latched by the last `cmp`.
    pub cmp: Option<(Width, u64, u64)>,
    /// Fault latched by a guarded instruction: kind and vISA pc.
    pub fault: Option<(TrapKind, u32)>,
    pub counters: Counters,
    /// Set after a probe fired so the interpreter does not fire it again
    /// when it resumes at the same instruction.
    pub skip_probe: bool,
    /// Set after a loop-header stop so the emulator resumes past the check.
    pub skip_header: bool,
}

impl Machine {
    pub fn top(&self) -> &Frame {
        self.frames.last().expect("active frame")
    }

    pub fn top_mut(&mut self) -> &mut Frame {
        self.frames.last_mut().expect("active frame")
    }
}

/// A live reference found on the stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Root {
    /// Activation depth, 0 being the outermost frame.
    pub frame: u32,
    pub func: u32,
    /// Slot index relative to the frame's first slot.
    pub slot: u32,
    pub value: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct RootSet {
    pub roots: Vec<Root>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanError {
    /// Compiled frames exist but the compiler was told not to store tags.
    TagsDisabled,
    /// A live slot carries no valid tag.
    Untagged { frame: u32, slot: u32 },
}

impl fmt::Display for ScanError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScanError::TagsDisabled => f.write_str("root scan with tagging disabled"),
            ScanError::Untagged { frame, slot } => write!(f, "untagged live slot {slot} in frame {frame}"),
        }
    }
}

/// Finds every non-null reference on the stack.
///
/// `top_height` is the number of live slots of the innermost frame. Lower
/// frames are live up to the first slot of the frame above them. Compiled
/// frames under lazy tagging never store local tags, so their locals are
/// classified by the function's declarations instead.
pub fn scan_roots(m: &WasmModule, mach: &Machine, top_height: u32, tagging: Tagging) -> Result<RootSet, ScanError> {
    let mut roots = Vec::new();
    let n = mach.frames.len();
    if tagging == Tagging::None && mach.frames.iter().any(Frame::is_jit) {
        return Err(ScanError::TagsDisabled);
    }
    for (d, fr) in mach.frames.iter().enumerate() {
        let f = m.defined(fr.func()).expect("frame of a defined function");
        let vfp = fr.vfp();
        let end = if d + 1 < n { mach.frames[d + 1].vfp() } else { vfp + top_height };
        let lazy = fr.is_jit() && tagging == Tagging::Lazy;
        for s in vfp..end {
            let rel = s - vfp;
            let t = if lazy && rel < f.num_locals() {
                f.local_types[rel as usize]
            } else {
                match ValType::from_tag(mach.stack.tags[s as usize]) {
                    Some(t) => t,
                    None => return Err(ScanError::Untagged { frame: d as u32, slot: rel }),
                }
            };
            let v = mach.stack.values[s as usize];
            if t == ValType::Ref && v != 0 {
                roots.push(Root { frame: d as u32, func: fr.func(), slot: rel, value: v });
            }
        }
    }
    Ok(RootSet { roots })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TierError {
    /// The frame is not paused at a point both tiers can describe.
    NoSafepoint,
}

impl fmt::Display for TierError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("no safepoint at this location")
    }
}

/// Switches the top frame from the interpreter to compiled code.
///
/// The frame must be at function entry with no operands, or at a loop header
/// with the operand height the compiler recorded. Only metadata changes.
pub fn tier_up(mach: &mut Machine, f: &WasmFunction, cf: &CompiledFunction) -> Result<(), TierError> {
    let sp = mach.sp;
    let fr = mach.top_mut();
    if fr.is_jit() {
        return Err(TierError::NoSafepoint);
    }
    let height = sp - fr.vfp();
    let pc = if fr.ip() == f.code_offset && height == f.num_locals() {
        0
    } else {
        match cf.loop_header_at_wasm(fr.ip()) {
            Some(h) if h.types.len() as u32 == height => h.visa_pc,
            _ => return Err(TierError::NoSafepoint),
        }
    };
    fr.set_jit(true);
    fr.set_ip(pc);
    fr.set_stp(0);
    Ok(())
}

/// Switches the top frame from compiled code to the interpreter.
///
/// The frame must be stopped at a loop header or just after a call. Tags of
/// live slots are rewritten from static types, since compiled code may have
/// skipped them. Returns the interpreter's stack height; after a call this
/// excludes the callee's result, which the caller still has to push.
pub fn tier_down(mach: &mut Machine, f: &WasmFunction, cf: &CompiledFunction) -> Result<u32, TierError> {
    let fr = *mach.top();
    if !fr.is_jit() {
        return Err(TierError::NoSafepoint);
    }
    let (wasm_pc, types) = if let Some(h) = cf.loop_header_at_visa(fr.ip()) {
        (h.wasm_pc, &h.types)
    } else if let Some(c) = cf.call_return_at_visa(fr.ip()) {
        (c.wasm_pc, &c.types)
    } else {
        return Err(TierError::NoSafepoint);
    };
    let vfp = fr.vfp();
    for (i, t) in types.iter().enumerate() {
        mach.stack.tags[vfp as usize + i] = t.tag();
    }
    let height = types.len() as u32;
    let fr = mach.top_mut();
    fr.set_jit(false);
    fr.request_tier_down(false);
    fr.set_ip(wasm_pc);
    fr.set_stp(f.stp_for(wasm_pc));
    mach.sp = vfp + height;
    Ok(height)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_fields_do_not_overlap() {
        let mut fr = Frame::new(7, 123_456, true);
        fr.set_hotness(u32::MAX);
        fr.request_tier_down(true);
        assert_eq!(fr.func(), 7);
        assert_eq!(fr.vfp(), 123_456);
        assert!(fr.is_jit());
        assert!(fr.tier_down_requested());
        assert_eq!(fr.hotness(), 0xffff);
        fr.set_jit(false);
        assert_eq!(fr.vfp(), 123_456);
        assert!(fr.tier_down_requested());
    }

    #[test]
    fn hotness_fires_at_threshold() {
        let mut fr = Frame::new(0, 0, false);
        let fired: Vec<bool> = (0..10).map(|_| hotness_tick(&mut fr, 10)).collect();
        assert_eq!(fired.iter().position(|&b| b), Some(9));
    }

    #[test]
    fn hotness_saturates_without_touching_other_flags() {
        let mut fr = Frame::new(3, 99, true);
        for _ in 0..70_000 {
            assert!(!hotness_tick(&mut fr, u32::MAX));
        }
        assert_eq!(fr.hotness(), 0xffff);
        assert_eq!(fr.vfp(), 99);
        assert!(fr.is_jit());
        assert!(!fr.tier_down_requested());
    }

    #[test]
    fn memory_bounds() {
        let mut m = Memory::new(1, Some(2));
        assert_eq!(m.store(MemKind::I32, 65532, 0, 0xdead_beef), Ok(()));
        assert_eq!(m.load(MemKind::I32, 65532, 0), Ok(0xdead_beef));
        assert_eq!(m.load(MemKind::U8, 65532, 0), Ok(0xef));
        assert_eq!(m.load(MemKind::I32, 65533, 0), Err(TrapKind::OutOfBounds));
        assert_eq!(m.load(MemKind::I64, u32::MAX, u32::MAX), Err(TrapKind::OutOfBounds));
        assert_eq!(m.grow(1), 1);
        assert_eq!(m.grow(1), u32::MAX);
        assert_eq!(m.pages(), 2);
    }

    #[test]
    fn empty_stack_has_no_roots() {
        let m = WasmModule::default();
        let mach = Machine::default();
        assert_eq!(scan_roots(&m, &mach, 0, Tagging::OnDemand), Ok(RootSet::default()));
    }
}
