//! The `spc` binary: exit codes, output and metrics rows.

use std::path::PathBuf;
use std::process::{Command, Output};

use spc_core::wasm::builder::{m_nop, FuncBody, ModuleBuilder, Op};
use spc_core::wasm::opcodes as op;
use spc_core::wasm::ValType::{Ref, I32};
use spc_harness::measure::CSV_HEADER;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("spc-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn write(name: &str, bytes: &[u8]) -> PathBuf {
    let p = scratch(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

fn spc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spc")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn divide() -> Vec<u8> {
    let mut b = ModuleBuilder::new();
    let t = b.add_type(&[I32, I32], Some(I32));
    let f = b.add_function(t, &[], FuncBody::from_ops(&[Op::LocalGet(0), Op::LocalGet(1), Op::Plain(op::I32_DIV_S)]));
    b.export_func("main", f);
    b.build().unwrap()
}

fn scans() -> Vec<u8> {
    let mut b = ModuleBuilder::new();
    let mk = b.add_type(&[I32], Some(Ref));
    let scan = b.add_type(&[], None);
    let main = b.add_type(&[], None);
    b.import_func("host", "make_ref", mk);
    b.import_func("host", "gc_scan", scan);
    let f = b.add_function(main, &[(1, Ref)], FuncBody::from_ops(&[Op::I32Const(7), Op::Call(0), Op::LocalSet(0), Op::Call(1)]));
    b.export_func("main", f);
    b.build().unwrap()
}

#[test]
fn nop_module_runs() {
    let p = write("nop.wasm", &m_nop());
    for mode in ["int", "jit", "tiered"] {
        let o = spc(&["run", &format!("--mode={mode}"), p.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{mode}: {}", text(&o));
    }
}

#[test]
fn arguments_and_results() {
    let p = write("div.wasm", &divide());
    let o = spc(&["run", "--mode=jit", p.to_str().unwrap(), "--", "-7", "2"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("-3"), "{}", text(&o));

    let o = spc(&["run", "--mode=int", p.to_str().unwrap(), "--", "1", "0"]);
    assert_eq!(code(&o), 2, "{}", text(&o));
    assert!(text(&o).contains("DivByZero"), "{}", text(&o));
}

#[test]
fn metrics_row_names_the_ablation() {
    let p = write("nomr.wasm", &divide());
    let csv = scratch("nomr.csv");
    let _ = std::fs::remove_file(&csv);
    for _ in 0..2 {
        let o = spc(&["run", "--mode=jit", "--no-mr", "--metrics", csv.to_str().unwrap(), p.to_str().unwrap(), "--", "9", "3"]);
        assert_eq!(code(&o), 0, "{}", text(&o));
    }
    let out = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3, "{out}");
    assert_eq!(lines[0], CSV_HEADER);
    for l in &lines[1..] {
        assert_eq!(l.split(',').nth(2), Some("nomr"), "{l}");
    }
}

#[test]
fn scanning_without_tags_is_a_trap() {
    let p = write("scan.wasm", &scans());
    let o = spc(&["run", "--mode=jit", "--tags=none", p.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", text(&o));
    assert!(text(&o).contains("ScanError"), "{}", text(&o));
    let o = spc(&["run", "--mode=jit", "--tags=lazy", p.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", text(&o));
}

#[test]
fn malformed_module_is_invalid() {
    let p = write("junk.wasm", b"\0asm\x02\0\0\0");
    let o = spc(&["run", p.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", text(&o));
}

#[test]
fn fuzz_rejects_zero_count() {
    let o = spc(&["fuzz", "--count", "0"]);
    assert_eq!(code(&o), 1, "{}", text(&o));
}

#[test]
fn fuzz_reports_injected_fault() {
    let o = spc(&["fuzz", "--seed", "1", "--count", "1000", "--inject-fault", "broken-merge"]);
    assert_eq!(code(&o), 1, "{}", text(&o));
    assert!(text(&o).contains("case "), "{}", text(&o));

    let o = spc(&["fuzz", "--seed", "3", "--count", "50"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
}

#[test]
fn m0_returns_immediately() {
    let k = spc_harness::kernels::all().into_iter().find(|k| k.name == "matmul").unwrap();
    let p = write("matmul.wasm", &k.bytes);
    let out = scratch("matmul.m0.wasm");
    let o = spc(&["m0", p.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let o = spc(&["run", "--mode=jit", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(String::from_utf8_lossy(&o.stdout).trim_start().starts_with('0'), "{}", text(&o));
}
