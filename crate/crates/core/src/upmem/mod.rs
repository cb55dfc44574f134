//! The `upmem` dialect: a DPU grid with per-DPU MRAM, per-tasklet WRAM
//! slices, host<->MRAM transfers, in-kernel DMA (`mram_read`/`mram_write`),
//! tasklet barriers, and device-library compute calls. MRAM DMA transfers
//! must be multiples of 8 bytes.

pub mod lower;

use crate::coreops::{expect_operands, expect_results, operand_tensor};
use crate::error::{Error, Result};
use crate::ir::registry::{OpSpec, Registry, VerifyCtx};
use crate::ir::types::{ElemKind, Type};
use crate::ir::Op;

/// Capacity and geometry of the simulated UPMEM system.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpmemSpec {
    pub ranks: usize,
    pub dpus_per_rank: usize,
    pub tasklets_per_dpu: usize,
    pub wram_bytes: usize,
    pub mram_bytes: usize,
    pub iram_bytes: usize,
}

impl Default for UpmemSpec {
    fn default() -> UpmemSpec {
        UpmemSpec {
            ranks: 4,
            dpus_per_rank: 128,
            tasklets_per_dpu: 16,
            wram_bytes: 64 * 1024,
            mram_bytes: 64 * 1024 * 1024,
            iram_bytes: 4 * 1024,
        }
    }
}

impl UpmemSpec {
    /// WRAM is statically partitioned into equal per-tasklet slices.
    pub fn wram_slice(&self) -> usize {
        self.wram_bytes / self.tasklets_per_dpu
    }
}

/// Rounds a byte count up to the 8-byte DMA granule.
pub fn align8(bytes: usize) -> usize {
    (bytes + 7) & !7
}

/// Maps workgroup dims level-wise onto (rank, dpu, tasklet), left-padding
/// with singleton levels.
pub fn grid_shape(wg_dims: &[usize]) -> Result<(usize, usize, usize)> {
    match wg_dims {
        [t] => Ok((1, 1, *t)),
        [d, t] => Ok((1, *d, *t)),
        [r, d, t] => Ok((*r, *d, *t)),
        _ => Err(Error::invalid(format!(
            "workgroup of depth {} cannot map onto (rank, dpu, tasklet)",
            wg_dims.len()
        ))),
    }
}

pub fn register(reg: &mut Registry) {
    reg.register("upmem", "alloc_dpus", OpSpec { isolated: false, verify: verify_alloc_dpus });
    reg.register("upmem", "copy_to_mram", OpSpec { isolated: false, verify: verify_copy_to });
    reg.register("upmem", "copy_from_mram", OpSpec { isolated: false, verify: verify_copy_from });
    reg.register("upmem", "launch_kernel", OpSpec { isolated: true, verify: verify_launch_kernel });
    reg.register("upmem", "tasklet_id", OpSpec { isolated: false, verify: verify_tasklet_id });
    reg.register("upmem", "wram_alloc", OpSpec { isolated: false, verify: verify_wram_alloc });
    reg.register("upmem", "mram_read", OpSpec { isolated: false, verify: verify_mram_read });
    reg.register("upmem", "mram_write", OpSpec { isolated: false, verify: verify_mram_write });
    reg.register("upmem", "barrier_wait", OpSpec { isolated: false, verify: verify_barrier });
    reg.register("upmem", "kernel_call", OpSpec { isolated: false, verify: verify_kernel_call });
}

fn grid_dims(ctx: &VerifyCtx, v: u32) -> Result<(usize, usize, usize)> {
    match ctx.ty(v) {
        Type::DpuGrid { ranks, dpus, tasklets } => Ok((*ranks, *dpus, *tasklets)),
        other => Err(Error::verify(format!("expected DPU grid, found {}", other))),
    }
}

fn verify_alloc_dpus(_ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 0)?;
    expect_results(op, 1)?;
    match &op.result_types[0] {
        Type::DpuGrid { ranks, dpus, tasklets } if *ranks > 0 && *dpus > 0 && *tasklets > 0 => {
            Ok(())
        }
        Type::DpuGrid { .. } => Err(Error::verify("grid dimension with zero extent")),
        _ => Err(Error::verify("alloc_dpus produces a grid")),
    }
}

/// Common attrs of MRAM copies: `base` byte offset, affine `map`, buffer
/// `level` and the originating workgroup `wg` dims.
fn copy_attrs(op: &Op) -> Result<()> {
    op.attr_int("base").ok_or_else(|| Error::verify("missing 'base'"))?;
    op.attr_list("map").ok_or_else(|| Error::verify("missing 'map'"))?;
    op.attr_list("wg").ok_or_else(|| Error::verify("missing 'wg'"))?;
    op.attr_int("level").ok_or_else(|| Error::verify("missing 'level'"))?;
    op.attr_list("chunk").ok_or_else(|| Error::verify("missing 'chunk'"))?;
    Ok(())
}

fn verify_copy_to(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 2)?;
    expect_results(op, 0)?;
    grid_dims(ctx, op.operands[0])?;
    operand_tensor(ctx, op, 1)?;
    copy_attrs(op)
}

fn verify_copy_from(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 1)?;
    expect_results(op, 1)?;
    grid_dims(ctx, op.operands[0])?;
    if op.result_types[0].tensor().is_none() {
        return Err(Error::verify("copy_from_mram produces a tensor"));
    }
    copy_attrs(op)
}

fn verify_launch_kernel(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 1)?;
    expect_results(op, 0)?;
    grid_dims(ctx, op.operands[0])?;
    if op.regions.len() != 1 {
        return Err(Error::verify("launch_kernel takes exactly one region"));
    }
    let region = &op.regions[0];
    if !region.args.is_empty() {
        return Err(Error::verify("kernel regions take no arguments"));
    }
    // Kernels are device programs: upmem ops plus core glue, barriers only at
    // the top level so phase splitting stays well-defined.
    let mut ok = Ok(());
    let _ = crate::ir::verify::for_each_op(region, &mut |inner| {
        if !(inner.dialect == "upmem" || inner.dialect == "core") {
            ok = Err(Error::verify(format!(
                "kernel body may only contain upmem and core operations, found {}",
                inner.name()
            )));
        }
        if inner.is("core", "return") {
            ok = Err(Error::verify("kernel body may not return".to_string()));
        }
        Ok(())
    });
    ok?;
    for top in &region.ops {
        for nested in &top.regions {
            let mut nested_ok = Ok(());
            let _ = crate::ir::verify::for_each_op(nested, &mut |inner| {
                if inner.is("upmem", "barrier_wait") {
                    nested_ok =
                        Err(Error::verify("barrier_wait must sit at the kernel top level"));
                }
                Ok(())
            });
            nested_ok?;
        }
    }
    Ok(())
}

fn verify_tasklet_id(_ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 0)?;
    expect_results(op, 1)?;
    if !op.result_types[0].is_scalar_of(ElemKind::I32) {
        return Err(Error::verify("tasklet_id produces an i32 scalar"));
    }
    Ok(())
}

fn verify_wram_alloc(_ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 0)?;
    expect_results(op, 1)?;
    if op.result_types[0].tensor().is_none() {
        return Err(Error::verify("wram_alloc produces a tensor"));
    }
    Ok(())
}

fn check_transfer(bytes: i64, elems: usize) -> Result<()> {
    if bytes % 8 != 0 {
        return Err(Error::verify(format!(
            "misaligned transfer: {} bytes is not a multiple of 8",
            bytes
        )));
    }
    if bytes as usize != elems * 4 {
        return Err(Error::verify(format!(
            "transfer of {} bytes does not match {} elements",
            bytes, elems
        )));
    }
    Ok(())
}

fn verify_mram_read(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 1)?;
    expect_results(op, 1)?;
    if !ctx.ty(op.operands[0]).is_scalar_of(ElemKind::I32) {
        return Err(Error::verify("mram_read offset must be an i32 scalar"));
    }
    let t = op.result_types[0]
        .tensor()
        .ok_or_else(|| Error::verify("mram_read produces a tensor"))?;
    let bytes = op.attr_int("bytes").ok_or_else(|| Error::verify("missing 'bytes'"))?;
    check_transfer(bytes, t.element_count())
}

fn verify_mram_write(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 2)?;
    expect_results(op, 0)?;
    let t = operand_tensor(ctx, op, 0)?;
    if !ctx.ty(op.operands[1]).is_scalar_of(ElemKind::I32) {
        return Err(Error::verify("mram_write offset must be an i32 scalar"));
    }
    let bytes = op.attr_int("bytes").ok_or_else(|| Error::verify("missing 'bytes'"))?;
    check_transfer(bytes, t.element_count())
}

fn verify_barrier(_ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 0)?;
    expect_results(op, 0)
}

/// Device-library compute call; shapes follow the corresponding cinm op.
fn verify_kernel_call(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    let callee = op.attr_token("callee").ok_or_else(|| Error::verify("missing 'callee'"))?;
    crate::cinm::verify_compute_shape(callee, ctx, op)
}
