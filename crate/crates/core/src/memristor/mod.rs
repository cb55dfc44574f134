//! The `memristor` dialect: a pool of crossbar devices with explicit tile
//! programming (write), in-place matrix-vector/matrix-matrix reads, and
//! host<->staging tile movement. Every op maps one-to-one onto a device
//! library call; counters track writes, read events and MVMs.

pub mod lower;

use crate::coreops::{expect_operands, expect_results, operand_tensor, result_tensor};
use crate::error::{Error, Result};
use crate::ir::registry::{OpSpec, Registry, VerifyCtx};
use crate::ir::types::{ElemKind, Type};
use crate::ir::Op;

pub fn register(reg: &mut Registry) {
    reg.register("memristor", "checkout", OpSpec { isolated: false, verify: verify_checkout });
    reg.register("memristor", "checkin", OpSpec { isolated: false, verify: verify_checkin });
    reg.register(
        "memristor",
        "write_to_crossbar",
        OpSpec { isolated: false, verify: verify_write },
    );
    reg.register("memristor", "gemv_read", OpSpec { isolated: false, verify: verify_gemv_read });
    reg.register("memristor", "gemm_read", OpSpec { isolated: false, verify: verify_gemm_read });
    reg.register("memristor", "copy_tile", OpSpec { isolated: false, verify: verify_copy_tile });
    reg.register("memristor", "store_tile", OpSpec { isolated: false, verify: verify_store_tile });
}

pub fn xbar_attr(op: &Op) -> Result<(usize, usize)> {
    match op.attr_list("xbar") {
        Some([r, c]) if *r > 0 && *c > 0 => Ok((*r as usize, *c as usize)),
        _ => Err(Error::verify("missing or malformed 'xbar' attribute")),
    }
}

fn device_geometry(ctx: &VerifyCtx, dev: u32) -> Result<(usize, usize)> {
    let def = ctx
        .def(dev)
        .filter(|d| d.is("memristor", "checkout"))
        .ok_or_else(|| Error::verify("device must come from memristor.checkout"))?;
    xbar_attr(def)
}

fn verify_checkout(_ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 0)?;
    expect_results(op, 1)?;
    xbar_attr(op)?;
    let pool = op.attr_int("pool").ok_or_else(|| Error::verify("missing 'pool'"))?;
    if pool < 1 {
        return Err(Error::verify("pool must hold at least one device"));
    }
    if op.result_types[0] != Type::MemDevice {
        return Err(Error::verify("checkout produces a device"));
    }
    Ok(())
}

fn verify_checkin(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 1)?;
    expect_results(op, 0)?;
    if *ctx.ty(op.operands[0]) != Type::MemDevice {
        return Err(Error::verify("checkin takes a device"));
    }
    Ok(())
}

fn verify_write(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 2)?;
    expect_results(op, 0)?;
    let (rows, cols) = device_geometry(ctx, op.operands[0])?;
    let tile = operand_tensor(ctx, op, 1)?;
    let (tr, tc) = match tile.shape.as_slice() {
        [r, c] => (*r, *c),
        [r] => (*r, 1),
        _ => return Err(Error::verify("crossbar tile must be rank 1 or 2")),
    };
    if tr > rows || tc > cols {
        return Err(Error::verify(format!(
            "exceeds crossbar: tile {}x{} exceeds {}x{}",
            tr, tc, rows, cols
        )));
    }
    Ok(())
}

/// out = x^T . W for the programmed tile W; the input drives the rows, the
/// output is read from the columns.
fn verify_gemv_read(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 2)?;
    expect_results(op, 1)?;
    let (rows, _) = device_geometry(ctx, op.operands[0])?;
    let x = operand_tensor(ctx, op, 1)?;
    match x.shape.as_slice() {
        [n] if *n <= rows => {}
        [n] => return Err(Error::verify(format!("input length {} exceeds {} rows", n, rows))),
        _ => return Err(Error::verify("gemv_read takes a rank-1 input")),
    }
    result_tensor(op, 0)?;
    Ok(())
}

/// out = X . W; each row of X is one MVM input.
fn verify_gemm_read(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 2)?;
    expect_results(op, 1)?;
    let (rows, _) = device_geometry(ctx, op.operands[0])?;
    let x = operand_tensor(ctx, op, 1)?;
    match x.shape.as_slice() {
        [_, k] if *k <= rows => {}
        [_, k] => return Err(Error::verify(format!("input width {} exceeds {} rows", k, rows))),
        _ => return Err(Error::verify("gemm_read takes a rank-2 input")),
    }
    result_tensor(op, 0)?;
    Ok(())
}

/// Host region -> staging tile; dynamic offsets, static sizes.
fn verify_copy_tile(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    let host = operand_tensor(ctx, op, 0)?;
    let rank = host.rank();
    expect_operands(op, 1 + rank)?;
    for i in 0..rank {
        if !ctx.ty(op.operands[1 + i]).is_scalar_of(ElemKind::I32) {
            return Err(Error::verify("tile offsets must be i32 scalars"));
        }
    }
    let sizes = op.attr_list("sizes").ok_or_else(|| Error::verify("missing 'sizes'"))?;
    let out = result_tensor(op, 0)?;
    if sizes.len() != rank || out.shape.iter().zip(sizes).any(|(d, s)| *d as i64 != *s) {
        return Err(Error::verify("staging tile shape does not match 'sizes'"));
    }
    Ok(())
}

/// Staging tile -> host region (functional update of the host tensor).
fn verify_store_tile(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    let host = operand_tensor(ctx, op, 0)?.clone();
    let tile = operand_tensor(ctx, op, 1)?;
    if tile.rank() != host.rank() {
        return Err(Error::verify("staging tile rank mismatch"));
    }
    expect_operands(op, 2 + host.rank())?;
    let out = result_tensor(op, 0)?;
    if *out != host {
        return Err(Error::verify("store_tile result must match the host type"));
    }
    Ok(())
}
