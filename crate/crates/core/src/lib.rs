//! A single-pass WebAssembly baseline compiler driven by abstract interpretation,
//! integrated with an in-place interpreter that shares a tagged value-stack frame
//! layout with compiled code.
//!
//! The crate is `no_std` (with `alloc`). It contains:
//!
//! - [`wasm`]: decoding, validation (with branch sidetables) and a module builder.
//! - [`abstract_state`]: the compiler's abstract value/control stacks and register allocator.
//! - [`visa`]: a small deterministic virtual ISA, code buffer and disassembler.
//! - [`compiler`]: the single-pass compiler with its optimization and tagging configurations.
//! - [`runtime`]: value stack, frame layout, root scanning and tier transitions.
//! - [`interp`], [`emulator`]: the two execution tiers.
//! - [`engine`]: the executor that runs either tier (or both, with tiering) over one value stack.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod abstract_state;
pub mod compiler;
pub mod emulator;
pub mod engine;
pub mod interp;
pub mod metrics;
pub mod runtime;
pub mod values;
pub mod visa;
pub mod wasm;

pub use compiler::{compile_function, CompiledFunction, CompilerConfig, Tagging};
pub use engine::{Engine, EngineConfig, ExecMode, Outcome};
pub use metrics::MetricsRecord;
pub use wasm::{decode_module, validate, ValType, WasmFunction, WasmModule};
