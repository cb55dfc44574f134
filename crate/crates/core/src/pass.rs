//! Pass pipeline: named passes with string options, a registry, and a trace
//! of per-pass op counts. Running the same pipeline on the same module is
//! deterministic.

use crate::error::{Error, Result};
use crate::ir::Module;
use std::collections::BTreeMap;

/// One pipeline entry: `name{key=value,...}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PassSpec {
    pub name: String,
    pub options: BTreeMap<String, String>,
}

impl PassSpec {
    pub fn parse(text: &str) -> Result<PassSpec> {
        let text = text.trim();
        let (name, opts) = match text.split_once('{') {
            Some((n, rest)) => {
                let rest = rest
                    .strip_suffix('}')
                    .ok_or_else(|| Error::invalid(format!("unterminated options in '{}'", text)))?;
                (n.trim().to_string(), rest)
            }
            None => (text.to_string(), ""),
        };
        let mut options = BTreeMap::new();
        for kv in opts.split(',').filter(|s| !s.trim().is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("malformed option '{}'", kv)))?;
            options.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(PassSpec { name, options })
    }

    pub fn opt(&self, key: &str) -> Option<&str> {
        self.options.get(key).map(|s| s.as_str())
    }

    pub fn opt_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.options.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::invalid(format!("option {}={} is not a number", key, v))),
        }
    }

    /// Parses `4x16`-style dimension lists.
    pub fn opt_dims(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.options.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split('x')
                .map(|d| {
                    d.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::invalid(format!("malformed dims '{}'", v)))
                })
                .collect(),
        }
    }
}

/// An ordered list of pass specs.
#[derive(Clone, Debug, Default)]
pub struct PassPipeline {
    pub passes: Vec<PassSpec>,
}

impl PassPipeline {
    pub fn parse(names: &[&str]) -> Result<PassPipeline> {
        let passes = names.iter().map(|n| PassSpec::parse(n)).collect::<Result<Vec<_>>>()?;
        Ok(PassPipeline { passes })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PassTraceEntry {
    pub pass: String,
    pub ops_before: usize,
    pub ops_after: usize,
}

pub type PassTrace = Vec<PassTraceEntry>;

type PassFn = fn(&mut Module, &PassSpec) -> Result<()>;

/// All registered passes by name.
pub fn pass_table() -> &'static BTreeMap<&'static str, PassFn> {
    use std::sync::OnceLock;
    static TABLE: OnceLock<BTreeMap<&'static str, PassFn>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t: BTreeMap<&'static str, PassFn> = BTreeMap::new();
        t.insert("cinm-conv2d-to-gemm", crate::cinm::rewrites::conv2d_to_gemm_pass);
        t.insert("cinm-contract-to-gemm", crate::cinm::rewrites::contract_to_gemm_pass);
        t.insert("cinm-tile", crate::xform::tile_pass);
        t.insert("interchange", crate::xform::interchange_pass);
        t.insert("unroll", crate::xform::unroll_pass);
        t.insert("bufferize", crate::xform::bufferize_pass);
        t.insert("cinm-select-targets", crate::targetsel::select_targets_pass);
        t.insert("cinm-to-cnm", crate::cnm::lower::lower_pass);
        t.insert("cnm-to-upmem", crate::upmem::lower::lower_pass);
        t.insert("upmem-wram-opt", crate::upmem::lower::wram_opt_pass);
        t.insert("cinm-to-cim", crate::cim::lower::lower_pass);
        t.insert("cim-min-writes", crate::cim::lower::min_writes_pass);
        t.insert("cim-parallel", crate::cim::lower::parallel_pass);
        t.insert("cim-to-memristor", crate::memristor::lower::lower_pass);
        t
    })
}

/// Runs a pipeline; the input must verify, every pass output is re-verified,
/// and the trace records op counts around each pass.
pub fn run_pipeline(module: &Module, pipeline: &PassPipeline) -> Result<(Module, PassTrace)> {
    crate::ir::verify::verify_module(module)?;
    let mut m = module.clone();
    let mut trace = Vec::new();
    for spec in &pipeline.passes {
        let f = pass_table()
            .get(spec.name.as_str())
            .ok_or_else(|| Error::invalid(format!("unknown pass '{}'", spec.name)))?;
        let before = m.op_count();
        f(&mut m, spec).map_err(|e| Error::Pass { pass: spec.name.clone(), msg: e.to_string() })?;
        crate::ir::verify::verify_module(&m)
            .map_err(|e| Error::Pass { pass: spec.name.clone(), msg: e.to_string() })?;
        trace.push(PassTraceEntry {
            pass: spec.name.clone(),
            ops_before: before,
            ops_after: m.op_count(),
        });
    }
    Ok((m, trace))
}
