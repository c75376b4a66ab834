//! Checking that a probe inserted mid-run sees what the interpreter sees.

use std::cell::RefCell;
use std::rc::Rc;

use spc_core::engine::{Engine, EngineConfig, ExecMode, FrameView, Outcome};
use spc_core::wasm::builder::read_op;
use spc_core::wasm::reader::Reader;
use spc_core::wasm::WasmModule;
use spc_core::wasm::builder::Op;

/// `(pc, locals, operands)` at one probe firing.
pub type Firing = (u32, Vec<u64>, Vec<u64>);

/// Body pcs of the first instruction inside each loop of `func`.
pub fn loop_body_pcs(m: &WasmModule, func: u32) -> Vec<u32> {
    let f = m.defined(func).expect("defined function");
    let mut r = Reader::at(&m.bytes[..f.body.end], f.body.start + f.code_offset as usize);
    let mut pcs = Vec::new();
    while !r.is_at_end() {
        if let Some(Op::Loop(_)) = read_op(&mut r) {
            pcs.push((r.pos() - f.body.start) as u32);
        }
    }
    pcs
}

fn recorder(log: &Rc<RefCell<Vec<Firing>>>) -> Box<dyn FnMut(&FrameView<'_>)> {
    let log = log.clone();
    Box::new(move |v| log.borrow_mut().push((v.pc, v.locals.to_vec(), v.operands.to_vec())))
}

#[derive(Clone, Debug)]
pub struct SuffixCheck {
    /// Firings in the pure interpreter run.
    pub full: usize,
    /// Firings after inserting the probe mid-run.
    pub late: usize,
}

/// Runs `m`'s entry with a probe at `(func, pc)` in the interpreter, then
/// again compiled, inserting the probe after `pause` cost units. The second
/// run's firings must be a suffix of the first's, and results must agree.
pub fn probe_suffix(m: &WasmModule, func: u32, pc: u32, pause: u64) -> Result<SuffixCheck, String> {
    let entry = m.entry_export().ok_or("no entry")?;
    let full = Rc::new(RefCell::new(Vec::new()));
    let mut e = Engine::new(m, EngineConfig::with_mode(ExecMode::Interp)).map_err(|e| e.to_string())?;
    e.insert_probe(func, pc, recorder(&full)).map_err(|e| e.to_string())?;
    let want = e.invoke(entry, &[]).map_err(|e| e.to_string())?;

    let late = Rc::new(RefCell::new(Vec::new()));
    let mut e = Engine::new(m, EngineConfig::with_mode(ExecMode::Jit)).map_err(|e| e.to_string())?;
    e.set_fuel(Some(pause));
    let mut got = e.invoke(entry, &[]).map_err(|e| e.to_string())?;
    if got == Outcome::Paused {
        e.insert_probe(func, pc, recorder(&late)).map_err(|e| e.to_string())?;
        e.set_fuel(None);
        got = e.resume().map_err(|e| e.to_string())?;
    }
    if got != want {
        return Err(format!("outcome {want:?} vs {got:?}"));
    }
    let (full, late) = (full.borrow(), late.borrow());
    if late.len() > full.len() || full[full.len() - late.len()..] != late[..] {
        return Err(format!("{} late firings are not a suffix of {}", late.len(), full.len()));
    }
    Ok(SuffixCheck { full: full.len(), late: late.len() })
}
