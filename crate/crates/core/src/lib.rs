//! A self-contained multi-level tensor compiler and device-simulation
//! toolkit: high-level tensor operations are progressively lowered through
//! compute-near-memory and compute-in-memory abstractions down to two
//! simulated backends (a DPU grid and a memristor crossbar pool), with a
//! reference interpreter as the numerical oracle and deterministic metrics
//! for every run.

pub mod cim;
pub mod cinm;
pub mod cnm;
pub mod coreops;
pub mod error;
pub mod interp;
pub mod ir;
pub mod memristor;
pub mod pass;
pub mod rng;
pub mod semantics;
pub mod targetsel;
pub mod tensor;
pub mod upmem;
pub mod xform;

pub use error::{Error, Result};
pub use ir::parser::parse_module;
pub use ir::printer::print_module;
pub use ir::verify::verify_module;
pub use ir::{Attr, Function, Module, Op, OpBuilder, Region, ValueId};
pub use tensor::TensorValue;
