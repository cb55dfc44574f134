//! The `cnm` dialect: workgroup trees of memory/compute resources, opaque
//! buffers reachable only through scatter/gather, and constrained kernel
//! launches. Buffers live at a tree level; a compute leaf can only access
//! buffer instances along its path to the root, which is what makes the
//! later device mapping decidable.

pub mod lower;

use crate::coreops::{expect_operands, expect_results, operand_tensor};
use crate::error::{Error, Result};
use crate::ir::registry::{OpSpec, Registry, VerifyCtx};
use crate::ir::types::{ElemKind, TensorType, Type};
use crate::ir::Op;

/// Affine index map from (node coordinates, per-node element coordinates) to
/// a flat host index: `flat = sum(coeff_i * coord_i) + offset`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScatterMap {
    pub coeffs: Vec<i64>,
    pub offset: i64,
}

impl ScatterMap {
    pub fn new(coeffs: Vec<i64>, offset: i64) -> ScatterMap {
        ScatterMap { coeffs, offset }
    }

    pub fn from_attr(list: &[i64]) -> Result<ScatterMap> {
        match list.split_last() {
            Some((offset, coeffs)) => Ok(ScatterMap { coeffs: coeffs.to_vec(), offset: *offset }),
            None => Err(Error::verify("scatter map must list coefficients and an offset")),
        }
    }

    pub fn to_attr(&self) -> Vec<i64> {
        let mut v = self.coeffs.clone();
        v.push(self.offset);
        v
    }

    pub fn eval(&self, coords: &[usize]) -> i64 {
        debug_assert_eq!(coords.len(), self.coeffs.len());
        let mut acc = self.offset;
        for (c, x) in self.coeffs.iter().zip(coords) {
            acc += c * *x as i64;
        }
        acc
    }

    /// Checks injectivity over the full (node, element) domain and range
    /// containment in `[0, host_len)`. With `onto` set, additionally requires
    /// the image to cover the range exactly (a bijection onto the target).
    pub fn check(&self, dims: &[usize], host_len: usize, onto: bool) -> Result<()> {
        let domain: usize = dims.iter().product();
        if self.coeffs.len() != dims.len() {
            return Err(Error::verify(format!(
                "scatter map arity {} does not match coordinate count {}",
                self.coeffs.len(),
                dims.len()
            )));
        }
        if onto && domain != host_len {
            return Err(Error::verify(format!(
                "gather map covers {} elements but the target holds {}",
                domain, host_len
            )));
        }
        let mut seen = vec![false; host_len];
        let mut coords = vec![0usize; dims.len()];
        for _ in 0..domain {
            let flat = self.eval(&coords);
            if flat < 0 || flat as usize >= host_len {
                return Err(Error::verify(format!(
                    "scatter map target index {} out of range [0, {})",
                    flat, host_len
                )));
            }
            if seen[flat as usize] {
                return Err(Error::verify(format!(
                    "overlapping scatter: host element {} covered twice",
                    flat
                )));
            }
            seen[flat as usize] = true;
            if !advance(&mut coords, dims) {
                break;
            }
        }
        Ok(())
    }
}

/// Odometer increment; returns false once the space is exhausted.
pub fn advance(coords: &mut [usize], dims: &[usize]) -> bool {
    for i in (0..dims.len()).rev() {
        coords[i] += 1;
        if coords[i] < dims[i] {
            return true;
        }
        coords[i] = 0;
    }
    false
}

/// Node coordinate dims for a buffer at `level` of a workgroup: the first
/// `level` workgroup dims. Level 0 is the root (a single instance); level
/// `dims.len()` addresses the leaves.
pub fn node_dims(wg_dims: &[usize], level: usize) -> &[usize] {
    &wg_dims[..level]
}

pub fn register(reg: &mut Registry) {
    reg.register("cnm", "allocate", OpSpec { isolated: false, verify: verify_allocate });
    reg.register("cnm", "alloc_buffer", OpSpec { isolated: false, verify: verify_alloc_buffer });
    reg.register("cnm", "scatter", OpSpec { isolated: false, verify: verify_scatter });
    reg.register("cnm", "gather", OpSpec { isolated: false, verify: verify_gather });
    reg.register("cnm", "launch", OpSpec { isolated: true, verify: verify_launch });
    reg.register("cnm", "wait", OpSpec { isolated: false, verify: verify_wait });
}

fn verify_allocate(_ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 0)?;
    expect_results(op, 1)?;
    match &op.result_types[0] {
        Type::Workgroup(dims) if !dims.is_empty() => {
            if dims.iter().any(|d| *d == 0) {
                return Err(Error::verify("workgroup dimension with zero extent"));
            }
            Ok(())
        }
        Type::Workgroup(_) => Err(Error::verify("workgroup needs at least one level")),
        _ => Err(Error::verify("allocate produces a workgroup")),
    }
}

fn workgroup_dims<'c>(ctx: &'c VerifyCtx, v: u32) -> Result<&'c [usize]> {
    match ctx.ty(v) {
        Type::Workgroup(dims) => Ok(dims),
        other => Err(Error::verify(format!("expected workgroup, found {}", other))),
    }
}

fn buffer_type<'c>(ctx: &'c VerifyCtx, v: u32) -> Result<(&'c TensorType, usize)> {
    match ctx.ty(v) {
        Type::Buffer { item, level } => Ok((item, *level)),
        other => Err(Error::verify(format!("expected buffer, found {}", other))),
    }
}

fn verify_alloc_buffer(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 1)?;
    expect_results(op, 1)?;
    let dims = workgroup_dims(ctx, op.operands[0])?;
    match &op.result_types[0] {
        Type::Buffer { level, .. } if *level <= dims.len() => Ok(()),
        Type::Buffer { level, .. } => Err(Error::verify(format!(
            "buffer level {} exceeds workgroup depth {}",
            level,
            dims.len()
        ))),
        _ => Err(Error::verify("alloc_buffer produces a buffer")),
    }
}

/// The workgroup a buffer was allocated on, following the def chain.
fn buffer_workgroup(ctx: &VerifyCtx, buf: u32) -> Result<u32> {
    let def = ctx
        .def(buf)
        .ok_or_else(|| Error::verify("buffer must be produced by cnm.alloc_buffer"))?;
    if !def.is("cnm", "alloc_buffer") {
        return Err(Error::verify("buffer must be produced by cnm.alloc_buffer"));
    }
    Ok(def.operands[0])
}

fn map_dims(ctx: &VerifyCtx, buf: u32) -> Result<Vec<usize>> {
    let (item, level) = buffer_type(ctx, buf)?;
    let wg = buffer_workgroup(ctx, buf)?;
    let wg_dims = workgroup_dims(ctx, wg)?;
    let mut dims: Vec<usize> = node_dims(wg_dims, level).to_vec();
    dims.extend_from_slice(&item.shape);
    Ok(dims)
}

fn verify_scatter(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 2)?;
    expect_results(op, 0)?;
    let host = operand_tensor(ctx, op, 0)?.clone();
    let (item, _) = buffer_type(ctx, op.operands[1])?;
    if item.elem != host.elem {
        return Err(Error::verify("scatter element kind mismatch"));
    }
    let map = ScatterMap::from_attr(
        op.attr_list("map").ok_or_else(|| Error::verify("missing 'map'"))?,
    )?;
    let dims = map_dims(ctx, op.operands[1])?;
    map.check(&dims, host.element_count(), false)
}

fn verify_gather(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 1)?;
    expect_results(op, 1)?;
    let out = match &op.result_types[0] {
        Type::Tensor(t) => t.clone(),
        _ => return Err(Error::verify("gather produces a tensor")),
    };
    let (item, _) = buffer_type(ctx, op.operands[0])?;
    if item.elem != out.elem {
        return Err(Error::verify("gather element kind mismatch"));
    }
    let map = ScatterMap::from_attr(
        op.attr_list("map").ok_or_else(|| Error::verify("missing 'map'"))?,
    )?;
    let dims = map_dims(ctx, op.operands[0])?;
    map.check(&dims, out.element_count(), true)
}

fn verify_launch(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    if op.operands.is_empty() {
        return Err(Error::verify("launch needs a workgroup operand"));
    }
    let wg = op.operands[0];
    let wg_dims = workgroup_dims(ctx, wg)?.to_vec();
    let bufs = &op.operands[1..];
    let ins = op.attr_int("ins").unwrap_or(0) as usize;
    if ins > bufs.len() {
        return Err(Error::verify("'ins' exceeds buffer operand count"));
    }
    expect_results(op, 1)?;
    if op.result_types[0] != Type::Token {
        return Err(Error::verify("launch produces a token"));
    }
    if op.regions.len() != 1 {
        return Err(Error::verify("launch takes exactly one region"));
    }

    let mut view_types = Vec::new();
    for (i, b) in bufs.iter().enumerate() {
        let (item, level) = buffer_type(ctx, *b)?;
        if buffer_workgroup(ctx, *b)? != wg {
            return Err(Error::verify(
                "buffer is not on the launch workgroup's root path".to_string(),
            ));
        }
        if i >= ins && level != wg_dims.len() {
            return Err(Error::verify("launch output buffers must live at the leaf level"));
        }
        view_types.push(Type::Tensor(item.clone()));
    }

    let region = &op.regions[0];
    let expected_args = bufs.len() + wg_dims.len();
    if region.args.len() != expected_args {
        return Err(Error::verify(format!(
            "launch region takes {} arguments (one view per buffer plus leaf coordinates), found {}",
            expected_args,
            region.args.len()
        )));
    }
    for (arg_ty, view) in region.arg_types.iter().zip(&view_types) {
        if arg_ty != view {
            return Err(Error::verify(format!(
                "launch region view argument must have type {}, found {}",
                view, arg_ty
            )));
        }
    }
    for coord in &region.arg_types[bufs.len()..] {
        if !coord.is_scalar_of(ElemKind::I32) {
            return Err(Error::verify("leaf coordinates must be i32 scalars"));
        }
    }

    // Leaf bodies stay device-agnostic: compute ops plus core glue only.
    let mut body_ok = Ok(());
    let _ = crate::ir::verify::for_each_op(region, &mut |inner| {
        if !(inner.dialect == "cinm" || inner.dialect == "core") {
            body_ok = Err(Error::verify(format!(
                "launch body may only contain cinm and core operations, found {}",
                inner.name()
            )));
        }
        if inner.is("core", "return") {
            body_ok = Err(Error::verify("launch body may not return".to_string()));
        }
        Ok(())
    });
    body_ok?;

    // A non-empty body must yield the final value of every output view.
    let n_outs = bufs.len() - ins;
    if !region.ops.is_empty() {
        match region.ops.last() {
            Some(y) if y.is("core", "yield") => {
                if y.operands.len() != n_outs {
                    return Err(Error::verify(format!(
                        "launch body must yield {} output views",
                        n_outs
                    )));
                }
                for (v, expected) in y.operands.iter().zip(&view_types[ins..]) {
                    if ctx.ty(*v) != expected {
                        return Err(Error::verify("launch yield type mismatch"));
                    }
                }
            }
            _ => return Err(Error::verify("launch body must end with core.yield")),
        }
    }
    Ok(())
}

fn verify_wait(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 2)?;
    expect_results(op, 0)?;
    workgroup_dims(ctx, op.operands[0])?;
    if *ctx.ty(op.operands[1]) != Type::Token {
        return Err(Error::verify("wait takes a launch token"));
    }
    Ok(())
}
