//! Running one module under one configuration, with timings.

use std::fmt;
use std::time::Instant;

use spc_core::compiler::CompilerConfig;
use spc_core::engine::{Engine, EngineConfig, EngineError, ExecMode, Outcome};
use spc_core::runtime::DEFAULT_HOT_THRESHOLD;
use spc_core::values::TrapKind;
use spc_core::wasm::{LoadError, ValType, WasmModule};
use spc_core::MetricsRecord;

/// An execution strategy: a tier plus, for compiled code, the compiler settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunConfig {
    pub mode: ExecMode,
    pub compiler: CompilerConfig,
    pub hot_threshold: u32,
}

impl RunConfig {
    pub const fn interp() -> Self {
        RunConfig { mode: ExecMode::Interp, compiler: CompilerConfig::allopt(), hot_threshold: DEFAULT_HOT_THRESHOLD }
    }

    pub const fn jit(compiler: CompilerConfig) -> Self {
        RunConfig { mode: ExecMode::Jit, compiler, hot_threshold: DEFAULT_HOT_THRESHOLD }
    }

    /// `int`, the compiler configuration name for `jit`, or `tiered-` plus it.
    pub fn name(&self) -> String {
        match self.mode {
            ExecMode::Interp => "int".into(),
            ExecMode::Jit => self.compiler.name(),
            ExecMode::Tiered => format!("tiered-{}", self.compiler.name()),
        }
    }

    pub fn parse(s: &str) -> Option<RunConfig> {
        if s == "int" {
            return Some(RunConfig::interp());
        }
        if let Some(rest) = s.strip_prefix("tiered-") {
            let c = CompilerConfig::parse(rest)?;
            return Some(RunConfig { mode: ExecMode::Tiered, ..RunConfig::jit(c) });
        }
        CompilerConfig::parse(s.strip_prefix("jit-").unwrap_or(s)).map(RunConfig::jit)
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig { mode: self.mode, compiler: self.compiler, hot_threshold: self.hot_threshold, ..Default::default() }
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug)]
pub enum RunError {
    Load(LoadError),
    Engine(EngineError),
    NoEntry,
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Load(e) => write!(f, "invalid module: {e}"),
            RunError::Engine(e) => write!(f, "{e}"),
            RunError::NoEntry => f.write_str("module exports no function"),
        }
    }
}

impl std::error::Error for RunError {}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub outcome: Outcome,
    pub result_type: Option<ValType>,
    pub metrics: MetricsRecord,
}

impl RunResult {
    pub fn trap(&self) -> Option<TrapKind> {
        match self.outcome {
            Outcome::Trapped { kind, .. } => Some(kind),
            _ => None,
        }
    }
}

fn ns(t: Instant) -> u64 {
    t.elapsed().as_nanos() as u64
}

/// Decodes, instantiates, compiles (for `jit`) and runs the entry export.
///
/// Timings: `decode_validate_ns` covers loading, `compile_ns` compiling every
/// function up front, `setup_ns` everything before the first instruction runs
/// and `exec_ns` the run itself. Tiered runs compile lazily inside `exec_ns`.
pub fn run_bytes(bytes: &[u8], cfg: &RunConfig, args: &[u64], limit_cost: Option<u64>) -> Result<RunResult, RunError> {
    let start = Instant::now();
    let m = WasmModule::load(bytes).map_err(RunError::Load)?;
    let decode_validate_ns = ns(start);
    run_module(&m, cfg, args, limit_cost, start, decode_validate_ns)
}

fn run_module(m: &WasmModule, cfg: &RunConfig, args: &[u64], limit_cost: Option<u64>, start: Instant, decode_validate_ns: u64) -> Result<RunResult, RunError> {
    let entry = m.entry_export().ok_or(RunError::NoEntry)?;
    let mut e = Engine::new(m, cfg.engine_config()).map_err(RunError::Engine)?;
    let t = Instant::now();
    if cfg.mode == ExecMode::Jit {
        e.compile_all();
    }
    let compile_ns = ns(t);
    let setup_ns = ns(start);
    e.set_fuel(limit_cost);
    let t = Instant::now();
    let outcome = e.invoke(entry, args).map_err(RunError::Engine)?;
    let exec_ns = ns(t);
    let metrics = MetricsRecord { code_bytes_in: code_bytes_in(m), decode_validate_ns, compile_ns, setup_ns, exec_ns, ..e.metrics() };
    Ok(RunResult { outcome, result_type: m.func_type(entry).and_then(|t| t.result), metrics })
}

/// Function body bytes of `m`. Reported for every tier, compiled or not.
pub fn code_bytes_in(m: &WasmModule) -> u64 {
    m.functions.iter().map(|f| (f.body.end - f.body.start) as u64).sum()
}

/// Formats raw slot bits as a value of type `t`.
pub fn format_value(t: ValType, bits: u64) -> String {
    match t {
        ValType::I32 => (bits as u32 as i32).to_string(),
        ValType::I64 => (bits as i64).to_string(),
        ValType::F32 => format!("{:?}", f32::from_bits(bits as u32)),
        ValType::F64 => format!("{:?}", f64::from_bits(bits)),
        ValType::Ref if bits == 0 => "null".into(),
        ValType::Ref => format!("ref:{}", bits - 1),
    }
}

/// Parses a command-line argument as a value of type `t`.
pub fn parse_value(t: ValType, s: &str) -> Option<u64> {
    Some(match t {
        ValType::I32 => s.parse::<i32>().map(|v| v as u32 as u64).or_else(|_| s.parse::<u32>().map(u64::from)).ok()?,
        ValType::I64 => s.parse::<i64>().map(|v| v as u64).or_else(|_| s.parse::<u64>()).ok()?,
        ValType::F32 => s.parse::<f32>().ok()?.to_bits() as u64,
        ValType::F64 => s.parse::<f64>().ok()?.to_bits(),
        ValType::Ref if s == "null" => 0,
        ValType::Ref => s.strip_prefix("ref:").unwrap_or(s).parse::<u64>().ok()? + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_names_round_trip() {
        for s in ["int", "allopt", "nomr", "lazytags", "nok+notags", "tiered-allopt"] {
            assert_eq!(RunConfig::parse(s).unwrap().name(), s);
        }
        assert_eq!(RunConfig::parse("jit-allopt").unwrap().name(), "allopt");
    }

    #[test]
    fn values_round_trip() {
        for (t, s) in [(ValType::I32, "-7"), (ValType::I64, "123456789012"), (ValType::F64, "1.5"), (ValType::Ref, "null"), (ValType::Ref, "ref:3")] {
            assert_eq!(format_value(t, parse_value(t, s).unwrap()), s);
        }
    }
}
