use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use spc_core::compiler::{compile_function, Fault, Tagging};
use spc_core::engine::{Engine, ExecMode, Outcome};
use spc_core::wasm::{opcodes, WasmModule};
use spc_core::MetricsRecord;

use spc_harness::fuzz::{fuzz_differential, full_matrix, tiering_matrix, with_fault, FuzzOptions};
use spc_harness::gen::GenOptions;
use spc_harness::measure::{measure_sq, write_csv, write_rows, Module, Row};
use spc_harness::runner::{code_bytes_in, format_value, parse_value, RunConfig};
use spc_harness::{kernels, m0};

/// Exit status for invalid input: a malformed module or bad arguments.
const EXIT_INVALID: u8 = 1;
const EXIT_TRAP: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Parser)]
#[command(name = "spc", version, about = "Single-pass WebAssembly compiler, interpreter and measurement harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a module's entry function.
    Run(RunArgs),
    /// Measure every module in a directory under several configurations.
    Bench(BenchArgs),
    /// Differential fuzzing of the compiler against the interpreter.
    Fuzz(FuzzArgs),
    /// Write the early-return variant of a module.
    M0 {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Write the generated benchmark kernels as .wasm files.
    Kernels {
        #[arg(long, default_value = "kernels")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "jit", value_parser = ["int", "jit", "tiered"])]
    mode: String,
    #[arg(long)]
    no_const_track: bool,
    #[arg(long)]
    no_kfold: bool,
    #[arg(long)]
    no_isel: bool,
    #[arg(long)]
    no_mr: bool,
    /// eager, eager-ops, eager-locals, on-demand, lazy or none.
    #[arg(long, default_value = "on-demand")]
    tags: String,
    #[arg(long)]
    hot_threshold: Option<u32>,
    /// Print the compiled code of every function.
    #[arg(long)]
    disasm: bool,
    /// Print `pc opcode stack-height` before each interpreted instruction.
    #[arg(long)]
    trace: bool,
    /// Append a metrics row to this CSV file.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Stop after this many cost units.
    #[arg(long)]
    limit_cost: Option<u64>,
    file: PathBuf,
    #[arg(last = true)]
    args: Vec<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    suite: PathBuf,
    /// Comma-separated configuration names, e.g. `int,allopt,nomr,lazytags`.
    #[arg(long, default_value = "int,allopt,nok,nokfold,noisel,nomr")]
    configs: String,
    #[arg(long, default_value_t = 3)]
    reps: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FuzzArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    /// Also run random tier-up/tier-down schedules.
    #[arg(long)]
    tiering: bool,
    /// Switch on a deliberate miscompilation (`broken-merge`).
    #[arg(long)]
    inject_fault: Option<String>,
    #[arg(long)]
    no_shrink: bool,
}

fn load(path: &Path) -> anyhow::Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn run_cmd(a: RunArgs) -> anyhow::Result<ExitCode> {
    let mut name = Vec::new();
    for (on, n) in [(a.no_const_track, "nok"), (a.no_kfold, "nokfold"), (a.no_isel, "noisel"), (a.no_mr, "nomr")] {
        if on {
            name.push(n);
        }
    }
    let Some(tagging) = Tagging::parse(&a.tags) else {
        eprintln!("unknown tagging mode {}", a.tags);
        return Ok(ExitCode::from(EXIT_INVALID));
    };
    name.push(tagging.name());
    let mut cfg = RunConfig::parse(&name.join("+")).expect("flag combination parses");
    cfg.mode = ExecMode::parse(&a.mode).expect("checked by clap");
    if let Some(t) = a.hot_threshold {
        cfg.hot_threshold = t;
    }

    let bytes = load(&a.file)?;
    let t = std::time::Instant::now();
    let m = match WasmModule::load(&bytes) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("{}: {e}", a.file.display());
            return Ok(ExitCode::from(EXIT_INVALID));
        }
    };
    let decode_validate_ns = t.elapsed().as_nanos() as u64;
    let Some(entry) = m.entry_export() else {
        eprintln!("{}: no exported function", a.file.display());
        return Ok(ExitCode::from(EXIT_INVALID));
    };
    let ty = m.func_type(entry).expect("export").clone();
    if a.args.len() != ty.params.len() {
        eprintln!("entry takes {} arguments, got {}", ty.params.len(), a.args.len());
        return Ok(ExitCode::from(EXIT_INVALID));
    }
    let mut args = Vec::new();
    for (s, &t) in a.args.iter().zip(&ty.params) {
        match parse_value(t, s) {
            Some(v) => args.push(v),
            None => {
                eprintln!("cannot read {s:?} as {}", t.name());
                return Ok(ExitCode::from(EXIT_INVALID));
            }
        }
    }

    if a.disasm {
        for i in 0..m.functions.len() {
            let f = (m.imports.len() + i) as u32;
            let cf = compile_function(&m, f, &cfg.compiler);
            println!("func {f}:");
            print!("{}", cf.disassemble());
        }
    }

    let mut e = match Engine::new(&m, cfg.engine_config()) {
        Ok(e) => e,
        Err(err) => {
            eprintln!("{}: {err}", a.file.display());
            return Ok(ExitCode::from(EXIT_INVALID));
        }
    };
    let t = std::time::Instant::now();
    if cfg.mode == ExecMode::Jit {
        e.compile_all();
    }
    let compile_ns = t.elapsed().as_nanos() as u64;
    let setup_ns = decode_validate_ns + compile_ns;
    if a.trace {
        let out = std::io::stdout();
        e.set_trace(Some(Box::new(move |_, pc, opc, height| {
            let _ = writeln!(out.lock(), "{pc} {} {height}", opcodes::name(opc).unwrap_or("?"));
        })));
    }
    e.set_fuel(a.limit_cost);
    let t = std::time::Instant::now();
    let outcome = e.invoke(entry, &args)?;
    let exec_ns = t.elapsed().as_nanos() as u64;
    for v in &e.printed {
        println!("print: {v}");
    }
    let code = match outcome {
        Outcome::Returned(v) => {
            if let (Some(v), Some(t)) = (v, ty.result) {
                println!("{}", format_value(t, v));
            }
            ExitCode::SUCCESS
        }
        Outcome::Trapped { kind, func, pc } => {
            eprintln!("trap: {kind} in function {func} at pc {pc}");
            ExitCode::from(EXIT_TRAP)
        }
        Outcome::Paused => {
            eprintln!("trap: cost limit of {} units exceeded", a.limit_cost.unwrap_or(0));
            ExitCode::from(EXIT_TRAP)
        }
    };

    if let Some(path) = a.metrics {
        let metrics = MetricsRecord { code_bytes_in: code_bytes_in(&m), decode_validate_ns, compile_ns, setup_ns, exec_ns, ..e.metrics() };
        let module = a.file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let row = Row { suite: "cli".into(), module, config: cfg.name(), repetition: 0, metrics, adjusted_speedup: Err("unmeasured".into()) };
        let fresh = fs::metadata(&path).map_or(true, |m| m.len() == 0);
        let f = fs::OpenOptions::new().create(true).append(true).open(&path)?;
        write_rows(f, &[row], fresh)?;
    }
    Ok(code)
}

fn bench_cmd(a: BenchArgs) -> anyhow::Result<ExitCode> {
    let suite = a.suite.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "suite".into());
    let mut modules = Vec::new();
    let mut paths: Vec<PathBuf> = fs::read_dir(&a.suite)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "wasm")).collect();
    paths.sort();
    for p in paths {
        let name = p.file_stem().expect("file name").to_string_lossy().into_owned();
        modules.push(Module { suite: suite.clone(), name, bytes: load(&p)? });
    }
    if modules.is_empty() {
        bail!("no .wasm files in {}", a.suite.display());
    }
    let mut configs = Vec::new();
    for c in a.configs.split(',') {
        match RunConfig::parse(c.trim()) {
            Some(c) => configs.push(c),
            None => {
                eprintln!("unknown configuration {c}");
                return Ok(ExitCode::from(EXIT_INVALID));
            }
        }
    }
    let report = match measure_sq(&configs, &modules, a.reps.max(1)) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return Ok(ExitCode::from(EXIT_INVALID));
        }
    };
    write_csv(fs::File::create(&a.out)?, &report.rows)?;
    println!("{:<24} {:>14} {:>16}", "config", "setup MB/s", "adj. speedup");
    for p in &report.points {
        println!("{:<24} {:>14.2} {:>16.3}", p.config, p.setup_speed, p.adjusted_speedup);
    }
    Ok(ExitCode::SUCCESS)
}

fn fuzz_cmd(a: FuzzArgs) -> anyhow::Result<ExitCode> {
    let seed = match std::env::var("SPC_SEED") {
        Ok(s) => s.parse().with_context(|| format!("SPC_SEED={s}"))?,
        Err(_) => a.seed,
    };
    let mut matrix = full_matrix();
    if a.tiering {
        matrix.extend(tiering_matrix());
    }
    match a.inject_fault.as_deref() {
        None => {}
        Some("broken-merge") => matrix = with_fault(&matrix, Fault::BrokenMerge),
        Some(f) => {
            eprintln!("unknown fault {f}");
            return Ok(ExitCode::from(EXIT_INVALID));
        }
    }
    let opts = FuzzOptions { seed, count: a.count, gen: GenOptions::default(), shrink: !a.no_shrink, stop_early: true };
    let r = fuzz_differential(&opts, &matrix);
    println!("seed {seed}: {} cases ({} trapped, {} skipped), {} runs, {} with refs and scans", r.cases, r.trapped, r.skipped, r.runs, r.ref_scan_cases);
    match r.divergences.first() {
        None => {
            println!("no divergences");
            Ok(ExitCode::SUCCESS)
        }
        Some(d) => {
            println!("divergence: {d}");
            Ok(ExitCode::from(EXIT_INVALID))
        }
    }
}

fn main() -> ExitCode {
    // die quietly when the reader of our output goes away, like other Unix tools
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_INVALID) } else { ExitCode::SUCCESS };
        }
    };
    let r = match cli.cmd {
        Cmd::Run(a) => run_cmd(a),
        Cmd::Bench(a) => bench_cmd(a),
        Cmd::Fuzz(a) => fuzz_cmd(a),
        Cmd::M0 { input, output } => (|| {
            match m0::make_m0(&load(&input)?) {
                Ok(b) => fs::write(&output, b)?,
                Err(e) => {
                    eprintln!("{}: {e}", input.display());
                    return Ok(ExitCode::from(EXIT_INVALID));
                }
            }
            Ok(ExitCode::SUCCESS)
        })(),
        Cmd::Kernels { out } => (|| {
            fs::create_dir_all(&out)?;
            for k in kernels::all() {
                fs::write(out.join(format!("{}.wasm", k.name)), &k.bytes)?;
                println!("{:<16} {:>8} bytes", k.name, k.bytes.len());
            }
            Ok(ExitCode::SUCCESS)
        })(),
    };
    r.unwrap_or_else(|e: anyhow::Error| {
        eprintln!("error: {e:#}");
        ExitCode::from(EXIT_INTERNAL)
    })
}
