//! Metrics rows and the setup/execution split.
//!
//! For a configuration E and module m, `T_E(m)` is the wall-clock time of a
//! whole run. Running `m0` (see [`crate::m0`]) bounds setup, and the empty
//! module bounds fixed startup. The adjusted execution time is
//! `T_E(m) - T_E(m0)`, and the adjusted speedup of E over a baseline B is the
//! ratio of the two adjusted times. Speedups are reported in cost units,
//! which are deterministic; wall-clock times are carried along for reference.

use std::io::Write;

use spc_core::wasm::builder::m_nop;
use spc_core::MetricsRecord;

use crate::m0::{make_m0, M0Error};
use crate::runner::{run_bytes, RunConfig, RunError, RunResult};

pub const CSV_HEADER: &str = "suite,module,config,repetition,code_bytes_in,code_bytes_out,instrs_emitted,moves_emitted,spills_emitted,tag_stores_emitted,instrs_retired,cost_units,tag_stores_executed,decode_validate_ns,compile_ns,setup_ns,exec_ns,adjusted_speedup";

#[derive(Clone, Debug)]
pub struct Row {
    pub suite: String,
    pub module: String,
    pub config: String,
    pub repetition: u32,
    pub metrics: MetricsRecord,
    /// `Ok(speedup)`, or a short description of why the run failed.
    pub adjusted_speedup: Result<f64, String>,
}

impl Row {
    fn fields(&self) -> Vec<String> {
        let m = &self.metrics;
        let mut v = vec![self.suite.clone(), self.module.clone(), self.config.clone(), self.repetition.to_string()];
        v.extend(
            [
                m.code_bytes_in,
                m.code_bytes_out,
                m.instrs_emitted,
                m.moves_emitted,
                m.spills_emitted,
                m.tag_stores_emitted,
                m.instrs_retired,
                m.cost_units,
                m.tag_stores_executed,
                m.decode_validate_ns,
                m.compile_ns,
                m.setup_ns,
                m.exec_ns,
            ]
            .map(|x| x.to_string()),
        );
        v.push(match &self.adjusted_speedup {
            Ok(s) => format!("{s}"),
            Err(e) => format!("error:{e}"),
        });
        v
    }
}

/// Writes `rows` under the fixed header.
pub fn write_csv<W: Write>(out: W, rows: &[Row]) -> csv::Result<()> {
    write_rows(out, rows, true)
}

/// Writes `rows`, preceded by the header if `header` is set.
pub fn write_rows<W: Write>(out: W, rows: &[Row], header: bool) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    if header {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

pub struct Module {
    pub suite: String,
    pub name: String,
    pub bytes: Vec<u8>,
}

/// One (config, module, repetition) measurement of `m`, `m0` and the empty module.
#[derive(Clone, Debug)]
pub struct Sample {
    pub config: String,
    pub module: usize,
    pub repetition: u32,
    pub m: RunResult,
    pub m0: RunResult,
    pub nop: RunResult,
}

impl Sample {
    /// Adjusted execution cost in cost units.
    pub fn adjusted_cost(&self) -> i64 {
        self.m.metrics.cost_units as i64 - self.m0.metrics.cost_units as i64
    }

    /// Upper bound on setup time: `T(m0) - T(M_nop)` in nanoseconds.
    pub fn setup_bound_ns(&self) -> i64 {
        total_ns(&self.m0) as i64 - total_ns(&self.nop) as i64
    }
}

pub fn total_ns(r: &RunResult) -> u64 {
    r.metrics.setup_ns + r.metrics.exec_ns
}

/// A configuration's place in setup-speed/execution-speed space.
#[derive(Clone, Debug)]
pub struct SqPoint {
    pub config: String,
    /// Input megabytes per second of setup, from the median setup bound.
    pub setup_speed: f64,
    /// Geometric mean over modules of the adjusted speedup.
    pub adjusted_speedup: f64,
}

pub struct SqReport {
    pub rows: Vec<Row>,
    pub samples: Vec<Sample>,
    pub points: Vec<SqPoint>,
}

#[derive(Debug)]
pub enum MeasureError {
    M0(String, M0Error),
    Run(String, RunError),
}

impl std::fmt::Display for MeasureError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MeasureError::M0(m, e) => write!(f, "{m}: {e}"),
            MeasureError::Run(m, e) => write!(f, "{m}: {e}"),
        }
    }
}

impl std::error::Error for MeasureError {}

fn median(mut v: Vec<i64>) -> i64 {
    v.sort_unstable();
    v[v.len() / 2]
}

/// Measures every module under every configuration `reps` times, against
/// the interpreter as baseline.
pub fn measure_sq(configs: &[RunConfig], modules: &[Module], reps: u32) -> Result<SqReport, MeasureError> {
    assert!(reps >= 1, "at least one repetition");
    let nop = m_nop();
    let m0s = modules.iter().map(|m| make_m0(&m.bytes).map_err(|e| MeasureError::M0(m.name.clone(), e))).collect::<Result<Vec<_>, _>>()?;
    let run = |name: &str, bytes: &[u8], cfg: &RunConfig| run_bytes(bytes, cfg, &[], None).map_err(|e| MeasureError::Run(name.to_string(), e));

    // the baseline is deterministic in cost units, so one run per module suffices
    let base = RunConfig::interp();
    let mut base_cost = Vec::new();
    for (m, m0) in modules.iter().zip(&m0s) {
        let a = run(&m.name, &m.bytes, &base)?;
        let b = run(&m.name, m0, &base)?;
        base_cost.push(a.metrics.cost_units as i64 - b.metrics.cost_units as i64);
    }

    let mut rows = Vec::new();
    let mut samples = Vec::new();
    let mut points = Vec::new();
    for cfg in configs {
        let name = cfg.name();
        let mut speedups = Vec::new();
        for rep in 0..reps {
            let nop_run = run("M_nop", &nop, cfg)?;
            for (i, (m, m0)) in modules.iter().zip(&m0s).enumerate() {
                let s = Sample { config: name.clone(), module: i, repetition: rep, m: run(&m.name, &m.bytes, cfg)?, m0: run(&m.name, m0, cfg)?, nop: nop_run.clone() };
                let speedup = match s.m.trap() {
                    Some(k) => Err(format!("trap:{k}")),
                    None if s.adjusted_cost() <= 0 => Err("no-work".into()),
                    None => Ok(base_cost[i] as f64 / s.adjusted_cost() as f64),
                };
                if rep == 0 {
                    if let Ok(x) = speedup {
                        speedups.push(x);
                    }
                }
                rows.push(Row { suite: m.suite.clone(), module: m.name.clone(), config: name.clone(), repetition: rep, metrics: s.m.metrics, adjusted_speedup: speedup });
                samples.push(s);
            }
        }
        let bytes: u64 = modules.iter().map(|m| m.bytes.len() as u64).sum();
        let mine: Vec<&Sample> = samples.iter().filter(|s| s.config == name).collect();
        let per_rep: Vec<i64> = mine.chunks(modules.len().max(1)).map(|c| c.iter().map(|s| s.setup_bound_ns()).sum()).collect();
        let bound = if per_rep.is_empty() { 0 } else { median(per_rep) };
        let setup_speed = if bound > 0 { bytes as f64 / 1e6 / (bound as f64 / 1e9) } else { f64::INFINITY };
        let adjusted_speedup = if speedups.is_empty() { f64::NAN } else { (speedups.iter().map(|x| x.ln()).sum::<f64>() / speedups.len() as f64).exp() };
        points.push(SqPoint { config: name, setup_speed, adjusted_speedup });
    }
    Ok(SqReport { rows, samples, points })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_matches_row_width() {
        let r = Row { suite: "s".into(), module: "m".into(), config: "int".into(), repetition: 0, metrics: MetricsRecord::default(), adjusted_speedup: Ok(1.0) };
        assert_eq!(r.fields().len(), CSV_HEADER.split(',').count());
        let mut out = Vec::new();
        write_csv(&mut out, &[r]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next(), Some(CSV_HEADER));
        assert!(text.lines().nth(1).unwrap().ends_with(",1"));
    }
}
