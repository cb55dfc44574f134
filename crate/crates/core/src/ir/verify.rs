//! Verifier: SSA scoping, isolation, per-op checks via the registry, and the
//! cross-op ordering rules of the device dialects (pending launches, futures,
//! crossbar programming).

use crate::error::{Error, Result};
use crate::ir::registry::{registry, VerifyCtx};
use crate::ir::{Function, Module, Op, Region, Type, ValueId};
use std::collections::{BTreeMap, HashMap, HashSet};

pub fn verify_module(module: &Module) -> Result<()> {
    let mut seen = HashSet::new();
    for func in &module.functions {
        if !seen.insert(&func.name) {
            return Err(Error::verify(format!("duplicate function name @{}", func.name)));
        }
        verify_function(func)
            .map_err(|e| Error::verify(format!("in @{}: {}", func.name, strip_prefix(&e))))?;
    }
    Ok(())
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Verify(m) => m.clone(),
        other => other.to_string(),
    }
}

fn verify_function(func: &Function) -> Result<()> {
    // Structural scoping and isolation.
    let mut scope: Vec<HashSet<ValueId>> = vec![func.body.args.iter().copied().collect()];
    walk_scoped(func, &func.body, &mut scope, true)?;

    // Terminator: the function body must end in a return matching the
    // declared result types.
    match func.body.ops.last() {
        Some(op) if op.is("core", "return") => {
            let types: Vec<&Type> = op.operands.iter().map(|v| func.value_type(*v)).collect();
            if types.len() != func.result_types.len()
                || types.iter().zip(&func.result_types).any(|(a, b)| **a != *b)
            {
                return Err(Error::verify("return types do not match function signature"));
            }
        }
        _ => return Err(Error::verify("function body must end with 'return'")),
    }

    // Per-op registered verification.
    let ctx = VerifyCtx { func, defs: collect_defs(&func.body) };
    for_each_op(&func.body, &mut |op| {
        let spec = registry()
            .lookup(&op.dialect, &op.mnemonic)
            .ok_or_else(|| Error::verify(format!("unknown operation {}", op.name())))?;
        (spec.verify)(&ctx, op)
            .map_err(|e| Error::verify(format!("{}: {}", op.name(), strip_prefix(&e))))
    })?;

    verify_launch_wait_order(func)?;
    verify_futures(func)?;
    verify_crossbar_order(func)?;
    Ok(())
}

fn collect_defs(region: &Region) -> BTreeMap<ValueId, &Op> {
    let mut defs = BTreeMap::new();
    fn walk<'a>(region: &'a Region, defs: &mut BTreeMap<ValueId, &'a Op>) {
        for op in &region.ops {
            for r in &op.results {
                defs.insert(*r, op);
            }
            for reg in &op.regions {
                walk(reg, defs);
            }
        }
    }
    walk(region, &mut defs);
    defs
}

fn walk_scoped(
    func: &Function,
    region: &Region,
    scope: &mut Vec<HashSet<ValueId>>,
    top: bool,
) -> Result<()> {
    if !top {
        scope.push(region.args.iter().copied().collect());
    }
    for op in &region.ops {
        for operand in &op.operands {
            if !scope.iter().any(|s| s.contains(operand)) {
                return Err(Error::verify(format!(
                    "operand of {} is not defined in scope (SSA dominance violation)",
                    op.name()
                )));
            }
        }
        let isolated = registry().lookup(&op.dialect, &op.mnemonic).map(|s| s.isolated);
        for reg in &op.regions {
            match isolated {
                Some(true) => {
                    let mut fresh = vec![HashSet::new()];
                    walk_scoped(func, reg, &mut fresh, false).map_err(|_| {
                        Error::verify(format!(
                            "unconstrained access: {} body references a value defined outside its region",
                            op.name()
                        ))
                    })?;
                }
                _ => walk_scoped(func, reg, scope, false)?,
            }
        }
        scope.last_mut().unwrap().extend(op.results.iter().copied());
    }
    if !top {
        scope.pop();
    }
    Ok(())
}

pub fn for_each_op<'a>(
    region: &'a Region,
    f: &mut impl FnMut(&'a Op) -> Result<()>,
) -> Result<()> {
    for op in &region.ops {
        f(op)?;
        for reg in &op.regions {
            for_each_op(reg, f)?;
        }
    }
    Ok(())
}

/// Gather on a buffer with a pending (un-waited) launch writing it is
/// rejected: wait is the synchronization point.
fn verify_launch_wait_order(func: &Function) -> Result<()> {
    // token -> out buffer ids, removed once waited.
    let mut pending: HashMap<ValueId, Vec<ValueId>> = HashMap::new();
    let mut result = Ok(());
    let _ = for_each_op(&func.body, &mut |op| {
        if op.is("cnm", "launch") {
            let ins = op.attr_int("ins").unwrap_or(0) as usize;
            let outs: Vec<ValueId> = op.operands.iter().skip(1 + ins).copied().collect();
            if let Some(tok) = op.results.first() {
                pending.insert(*tok, outs);
            }
        } else if op.is("cnm", "wait") {
            if let Some(tok) = op.operands.get(1) {
                pending.remove(tok);
            }
        } else if op.is("cnm", "gather") {
            if let Some(buf) = op.operands.first() {
                if pending.values().any(|outs| outs.contains(buf)) {
                    result = Err(Error::verify(
                        "gather before wait: buffer has a pending launch".to_string(),
                    ));
                }
            }
        }
        Ok(())
    });
    result
}

/// Every cim.execute future must be consumed by exactly one cim.barrier, and
/// nothing else may read it.
fn verify_futures(func: &Function) -> Result<()> {
    let mut futures: HashMap<ValueId, usize> = HashMap::new();
    let _ = for_each_op(&func.body, &mut |op| {
        if op.is("cim", "execute") {
            if let Some(r) = op.results.first() {
                futures.insert(*r, 0);
            }
        }
        Ok(())
    });
    let mut result = Ok(());
    let _ = for_each_op(&func.body, &mut |op| {
        for (i, operand) in op.operands.iter().enumerate() {
            if let Some(count) = futures.get_mut(operand) {
                if op.is("cim", "barrier") && i == 1 {
                    *count += 1;
                } else {
                    result = Err(Error::verify(
                        "cim.execute result may only be read through cim.barrier".to_string(),
                    ));
                }
            }
        }
        Ok(())
    });
    result?;
    if futures.values().any(|c| *c != 1) {
        return Err(Error::verify(
            "cim.execute result must be consumed by exactly one cim.barrier".to_string(),
        ));
    }
    Ok(())
}

/// Static read-before-write check for memristor devices: in pre-order program
/// order, a gemv_read/gemm_read on a device must be preceded by a
/// write_to_crossbar on the same device handle.
fn verify_crossbar_order(func: &Function) -> Result<()> {
    let mut written: HashSet<ValueId> = HashSet::new();
    let mut result = Ok(());
    let _ = for_each_op(&func.body, &mut |op| {
        if op.is("memristor", "write_to_crossbar") {
            if let Some(dev) = op.operands.first() {
                written.insert(*dev);
            }
        } else if op.is("memristor", "gemv_read") || op.is("memristor", "gemm_read") {
            if let Some(dev) = op.operands.first() {
                if !written.contains(dev) {
                    result = Err(Error::verify(
                        "read before write: crossbar device has no programmed tile".to_string(),
                    ));
                }
            }
        }
        Ok(())
    });
    result
}
