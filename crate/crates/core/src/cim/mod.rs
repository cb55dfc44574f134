//! The `cim` dialect: device acquisition with locking, asynchronous execute
//! with a barrier synchronization point, compulsory tiling to crossbar
//! geometry, and the min-writes loop interchange.

pub mod lower;

use crate::coreops::{expect_operands, expect_results, operand_tensor};
use crate::error::{Error, Result};
use crate::ir::registry::{OpSpec, Registry, VerifyCtx};
use crate::ir::types::{TensorType, Type};
use crate::ir::Op;

pub const DEFAULT_CROSSBAR: (usize, usize) = (128, 128);
pub const DEFAULT_POOL: usize = 4;

pub fn register(reg: &mut Registry) {
    reg.register("cim", "acquire", OpSpec { isolated: false, verify: verify_acquire });
    reg.register("cim", "execute", OpSpec { isolated: false, verify: verify_execute });
    reg.register("cim", "barrier", OpSpec { isolated: false, verify: verify_barrier });
    reg.register("cim", "release", OpSpec { isolated: false, verify: verify_release });
}

/// Crossbar geometry attribute `{xbar = [rows, cols]}`.
pub fn xbar_attr(op: &Op) -> Result<(usize, usize)> {
    match op.attr_list("xbar") {
        Some([r, c]) if *r > 0 && *c > 0 => Ok((*r as usize, *c as usize)),
        _ => Err(Error::verify("missing or malformed 'xbar' attribute")),
    }
}

fn verify_acquire(_ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 0)?;
    expect_results(op, 1)?;
    xbar_attr(op)?;
    if op.result_types[0] != Type::CimDevice {
        return Err(Error::verify("acquire produces a device"));
    }
    Ok(())
}

fn verify_execute(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 3)?;
    expect_results(op, 1)?;
    if *ctx.ty(op.operands[0]) != Type::CimDevice {
        return Err(Error::verify("execute takes a device"));
    }
    let acquire = ctx
        .def(op.operands[0])
        .filter(|d| d.is("cim", "acquire"))
        .ok_or_else(|| Error::verify("execute device must come from cim.acquire"))?;
    let (rows, cols) = xbar_attr(acquire)?;
    let a = operand_tensor(ctx, op, 1)?.clone();
    let b = operand_tensor(ctx, op, 2)?.clone();
    let kind = op.attr_token("kind").ok_or_else(|| Error::verify("missing 'kind'"))?;
    let result: TensorType = match kind {
        // a: (tm x tk), resident b: (tk x tn) -> (tm x tn)
        "gemm" => match (a.shape.as_slice(), b.shape.as_slice()) {
            ([tm, tk], [tk2, tn]) if tk == tk2 => {
                check_tile(*tk, *tn, rows, cols)?;
                TensorType::i32(vec![*tm, *tn])
            }
            _ => return Err(Error::verify("execute gemm tile shapes incompatible")),
        },
        // a: (tm x tk), resident b column: (tk) -> (tm)
        "gemv" => match (a.shape.as_slice(), b.shape.as_slice()) {
            ([tm, tk], [tk2]) if tk == tk2 => {
                check_tile(*tk, 1, rows, cols)?;
                TensorType::i32(vec![*tm])
            }
            _ => return Err(Error::verify("execute gemv tile shapes incompatible")),
        },
        other => return Err(Error::verify(format!("unknown execute kind '{}'", other))),
    };
    match &op.result_types[0] {
        Type::CimFuture(t) if *t == result => Ok(()),
        _ => Err(Error::verify(format!("execute produces !cim.future<{}>", result))),
    }
}

fn check_tile(rows_used: usize, cols_used: usize, rows: usize, cols: usize) -> Result<()> {
    if rows_used > rows || cols_used > cols {
        return Err(Error::verify(format!(
            "exceeds crossbar: tile {}x{} exceeds {}x{}",
            rows_used, cols_used, rows, cols
        )));
    }
    Ok(())
}

fn verify_barrier(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 2)?;
    expect_results(op, 1)?;
    if *ctx.ty(op.operands[0]) != Type::CimDevice {
        return Err(Error::verify("barrier takes a device"));
    }
    match ctx.ty(op.operands[1]) {
        Type::CimFuture(t) => {
            if op.result_types[0] != Type::Tensor(t.clone()) {
                return Err(Error::verify("barrier result must match the future's item type"));
            }
            Ok(())
        }
        _ => Err(Error::verify("barrier takes an execute token")),
    }
}

fn verify_release(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 1)?;
    expect_results(op, 0)?;
    if *ctx.ty(op.operands[0]) != Type::CimDevice {
        return Err(Error::verify("release takes a device"));
    }
    Ok(())
}
