//! Static and dynamic counters reported per run.

use crate::visa::VisaProgram;

/// Counters for one (module, configuration, repetition) measurement.
///
/// Static fields describe emitted code, dynamic fields are accumulated by the
/// execution tiers, and timing fields are filled in by the host harness.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MetricsRecord {
    pub code_bytes_in: u64,
    pub code_bytes_out: u64,
    pub instrs_emitted: u64,
    pub moves_emitted: u64,
    pub spills_emitted: u64,
    pub tag_stores_emitted: u64,
    pub instrs_retired: u64,
    pub cost_units: u64,
    pub tag_stores_executed: u64,
    pub decode_validate_ns: u64,
    pub compile_ns: u64,
    pub setup_ns: u64,
    pub exec_ns: u64,
}

impl MetricsRecord {
    /// Static counters of one compiled body of `bytes_in` input bytes.
    pub fn of_program(p: &VisaProgram, bytes_in: u64) -> Self {
        let mut m = MetricsRecord { code_bytes_in: bytes_in, code_bytes_out: p.code_bytes(), ..Default::default() };
        for i in &p.instrs {
            m.instrs_emitted += 1;
            m.moves_emitted += i.is_move() as u64;
            m.spills_emitted += i.is_spill() as u64;
            m.tag_stores_emitted += i.is_tag_store() as u64;
        }
        m
    }

    /// Adds the static counters of `o` to `self`.
    pub fn add_static(&mut self, o: &MetricsRecord) {
        self.code_bytes_in += o.code_bytes_in;
        self.code_bytes_out += o.code_bytes_out;
        self.instrs_emitted += o.instrs_emitted;
        self.moves_emitted += o.moves_emitted;
        self.spills_emitted += o.spills_emitted;
        self.tag_stores_emitted += o.tag_stores_emitted;
    }

    /// Compile time per input byte, if any input was compiled.
    pub fn compile_ns_per_byte(&self) -> Option<f64> {
        (self.code_bytes_in > 0).then(|| self.compile_ns as f64 / self.code_bytes_in as f64)
    }
}
