//! Registry of known operations. Parsing rejects any `dialect.mnemonic` pair
//! that is not registered here, and verification dispatches to the per-op
//! checks the dialect modules provide.

use crate::error::Result;
use crate::ir::{Function, Op};
use std::collections::BTreeMap;
use std::sync::OnceLock;

/// Context handed to per-op verifiers.
pub struct VerifyCtx<'a> {
    pub func: &'a Function,
    /// Defining op for every value produced by an op (region args excluded).
    pub defs: BTreeMap<u32, &'a Op>,
}

impl<'a> VerifyCtx<'a> {
    pub fn ty(&self, v: u32) -> &crate::ir::Type {
        self.func.value_type(v)
    }

    pub fn def(&self, v: u32) -> Option<&'a Op> {
        self.defs.get(&v).copied()
    }
}

pub type VerifyFn = fn(&VerifyCtx, &Op) -> Result<()>;

pub struct OpSpec {
    /// Isolated ops' regions may not reference values from enclosing scopes.
    pub isolated: bool,
    pub verify: VerifyFn,
}

pub struct Registry {
    ops: BTreeMap<(&'static str, &'static str), OpSpec>,
}

impl Registry {
    pub fn register(&mut self, dialect: &'static str, mnemonic: &'static str, spec: OpSpec) {
        self.ops.insert((dialect, mnemonic), spec);
    }

    pub fn lookup(&self, dialect: &str, mnemonic: &str) -> Option<&OpSpec> {
        // BTreeMap of &'static str keys; do a linear-free lookup via iterator
        // comparison on borrowed strs.
        self.ops.iter().find(|((d, m), _)| *d == dialect && *m == mnemonic).map(|(_, s)| s)
    }

    pub fn is_known(&self, dialect: &str, mnemonic: &str) -> bool {
        self.lookup(dialect, mnemonic).is_some()
    }
}

static REGISTRY: OnceLock<Registry> = OnceLock::new();

/// The global op registry; dialects register at first use.
pub fn registry() -> &'static Registry {
    REGISTRY.get_or_init(|| {
        let mut reg = Registry { ops: BTreeMap::new() };
        crate::coreops::register(&mut reg);
        crate::cinm::register(&mut reg);
        crate::cnm::register(&mut reg);
        crate::cim::register(&mut reg);
        crate::upmem::register(&mut reg);
        crate::memristor::register(&mut reg);
        reg
    })
}
