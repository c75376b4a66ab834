//! Command-line tooling around `spc-core`: stand-in benchmark kernels,
//! setup-time bounding, metrics collection and differential fuzzing.

pub mod bomb;
pub mod fuzz;
pub mod gen;
pub mod kernels;
pub mod m0;
pub mod measure;
pub mod probe;
pub mod runner;
