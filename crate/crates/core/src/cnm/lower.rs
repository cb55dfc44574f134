//! Lowering from cinm compute ops to cnm workgroup programs.
//!
//! Every supported op becomes one or more allocate / alloc_buffer / scatter /
//! launch / wait / gather groups. Elementwise ops are chunked across leaves;
//! gemm/gemv scatter row strips of the matrix and broadcast the other operand
//! through a root-level buffer; reductions produce per-leaf partials that a
//! second single-leaf stage combines on-device, so lowered modules contain no
//! host-side compute. Stages communicate through the host (gather, then
//! re-scatter), mirroring how DPUs exchange data in the modeled system.

use crate::cnm::ScatterMap;
use crate::coreops::BodyBuilder;
use crate::error::{Error, Result};
use crate::ir::types::{ElemKind, TensorType, Type};
use crate::ir::{Attr, Function, Module, Op, OpBuilder, Region, ValueId};
use crate::pass::PassSpec;
use crate::semantics::ReduceKind;
use crate::tensor::row_major_strides;

pub const DEFAULT_WG: [usize; 2] = [4, 16];
/// Byte budget for single-leaf merge stages; keeps stage-2 views inside the
/// default WRAM slice with room for outputs.
pub const STAGE2_BUDGET: usize = 3072;

fn ceil_div(a: usize, b: usize) -> usize {
    (a + b - 1) / b
}

/// Per-leaf chunking of a flat tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkPlan {
    pub leaves: usize,
    pub chunk: usize,
    pub padded: usize,
}

pub fn chunk_plan(total: usize, leaves: usize) -> ChunkPlan {
    let chunk = ceil_div(total.max(1), leaves);
    ChunkPlan { leaves, chunk, padded: chunk * leaves }
}

/// Row strips of an (m x k) matrix across the workgroup leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StripPlan {
    pub leaves: usize,
    pub strip: usize,
    pub padded_rows: usize,
}

pub fn strip_plan(rows: usize, leaves: usize) -> StripPlan {
    let strip = ceil_div(rows.max(1), leaves);
    StripPlan { leaves, strip, padded_rows: strip * leaves }
}

/// Stage-1 leaf count for candidate-merge lowerings (topk, simSearch,
/// histogram, reductions): halve until the single-leaf merge views fit the
/// stage budget and per-leaf chunks satisfy `min_chunk`.
pub fn merge_stage_leaves(
    total: usize,
    leaves: usize,
    per_leaf_merge_elems: usize,
    min_chunk: usize,
) -> usize {
    let mut l = leaves.max(1);
    loop {
        let chunk = ceil_div(total.max(1), l);
        let merge_bytes = l * per_leaf_merge_elems * 4;
        if (chunk >= min_chunk && merge_bytes <= STAGE2_BUDGET) || l == 1 {
            return l;
        }
        l = ceil_div(l, 2);
    }
}

/// Largest leaf count <= `leaves` that divides `rows` evenly with at least
/// `min_rows` rows per leaf, for lowerings where padded rows would corrupt
/// candidate ranking.
pub fn divisor_leaves(rows: usize, leaves: usize, min_rows: usize, merge_elems_per_leaf: usize) -> usize {
    let cap = leaves.min(rows.max(1));
    for cand in (1..=cap).rev() {
        if rows % cand == 0
            && rows / cand >= min_rows
            && cand * merge_elems_per_leaf * 4 <= STAGE2_BUDGET
        {
            return cand;
        }
    }
    1
}

// ---- IR-building helpers ---------------------------------------------------

struct CnmBuilder<'f, 'b> {
    bb: &'b mut BodyBuilder<'f>,
}

impl<'f, 'b> CnmBuilder<'f, 'b> {
    fn allocate(&mut self, dims: &[usize]) -> ValueId {
        self.bb.push1(OpBuilder::new("cnm", "allocate"), Type::Workgroup(dims.to_vec()))
    }

    fn alloc_buffer(&mut self, wg: ValueId, item: TensorType, level: usize) -> ValueId {
        self.bb.push1(
            OpBuilder::new("cnm", "alloc_buffer").operands(&[wg]),
            Type::Buffer { item, level },
        )
    }

    fn scatter(&mut self, host: ValueId, buf: ValueId, map: &ScatterMap) {
        self.bb.push0(
            OpBuilder::new("cnm", "scatter")
                .operands(&[host, buf])
                .attr_list("map", map.to_attr()),
        );
    }

    fn gather(&mut self, buf: ValueId, map: &ScatterMap, out: TensorType) -> ValueId {
        self.bb.push1(
            OpBuilder::new("cnm", "gather").operands(&[buf]).attr_list("map", map.to_attr()),
            out.into(),
        )
    }

    fn wait(&mut self, wg: ValueId, token: ValueId) {
        self.bb.push0(OpBuilder::new("cnm", "wait").operands(&[wg, token]));
    }

    /// Builds a launch: region args are views of (ins ++ outs) plus leaf
    /// coordinates; `body` returns the values yielded into the out views.
    fn launch(
        &mut self,
        wg: ValueId,
        wg_dims: &[usize],
        ins: &[(ValueId, TensorType)],
        outs: &[(ValueId, TensorType)],
        body: impl FnOnce(&mut BodyBuilder, &[ValueId]) -> Vec<ValueId>,
    ) -> ValueId {
        let mut args = Vec::new();
        let mut arg_types = Vec::new();
        for (_, item) in ins.iter().chain(outs) {
            let v = self.bb.func.new_value(Type::Tensor(item.clone()));
            args.push(v);
            arg_types.push(Type::Tensor(item.clone()));
        }
        for _ in wg_dims {
            let v = self.bb.func.new_value(crate::ir::types::scalar_i32());
            args.push(v);
            arg_types.push(crate::ir::types::scalar_i32());
        }
        let view_args: Vec<ValueId> = args[..ins.len() + outs.len()].to_vec();
        let mut inner = BodyBuilder::new(self.bb.func);
        let yields = body(&mut inner, &view_args);
        let mut ops = inner.ops;
        ops.push(OpBuilder::new("core", "yield").operands(&yields).no_results());
        let region = Region { args, arg_types, ops };
        let mut operands = vec![wg];
        operands.extend(ins.iter().map(|(b, _)| *b));
        operands.extend(outs.iter().map(|(b, _)| *b));
        let token = self.bb.push1(
            OpBuilder::new("cnm", "launch")
                .operands(&operands)
                .attr_int("ins", ins.len() as i64)
                .region(region),
            Type::Token,
        );
        self.wait(wg, token);
        token
    }
}

/// Map for per-leaf flat chunks: host_flat = lin(leaf) * chunk + e.
pub fn chunk_map(wg_dims: &[usize], chunk: usize) -> ScatterMap {
    let strides = row_major_strides(wg_dims);
    let mut coeffs: Vec<i64> = strides.iter().map(|s| (*s * chunk) as i64).collect();
    coeffs.push(1);
    ScatterMap::new(coeffs, 0)
}

/// Map for per-leaf row strips of a (rows x width) host: the leaf holds rows
/// [lin(leaf)*strip, ...).
pub fn strip_map(wg_dims: &[usize], strip: usize, width: usize) -> ScatterMap {
    let strides = row_major_strides(wg_dims);
    let mut coeffs: Vec<i64> = strides.iter().map(|s| (*s * strip * width) as i64).collect();
    coeffs.push(width as i64);
    coeffs.push(1);
    ScatterMap::new(coeffs, 0)
}

/// Identity map for a root-level (broadcast) buffer.
pub fn root_map(item_shape: &[usize]) -> ScatterMap {
    let coeffs: Vec<i64> = row_major_strides(item_shape).iter().map(|s| *s as i64).collect();
    ScatterMap::new(coeffs, 0)
}

/// Gather map realizing a transpose: leaf buffers are (width x strip) blocks
/// of the (width x rows) host, placed at column lin(leaf)*strip.
pub fn transpose_map(wg_dims: &[usize], strip: usize, width: usize, padded_rows: usize) -> ScatterMap {
    let strides = row_major_strides(wg_dims);
    let mut coeffs: Vec<i64> = strides.iter().map(|s| (*s * strip) as i64).collect();
    coeffs.push(padded_rows as i64);
    coeffs.push(1);
    ScatterMap::new(coeffs, 0)
}

// ---- the lowering ----------------------------------------------------------

/// True when the cinm op should be lowered by this pass given its optional
/// target annotation.
fn wants_cnm(op: &Op) -> bool {
    if op.dialect != "cinm" {
        return false;
    }
    match op.attr_token("target") {
        None => true,
        Some("upmem") => true,
        Some(_) => false,
    }
}

pub fn lower_pass(module: &mut Module, spec: &PassSpec) -> Result<()> {
    let wg_dims = spec.opt_dims("wg", &DEFAULT_WG)?;
    lower_module(module, &wg_dims)
}

pub fn lower_module(module: &mut Module, wg_dims: &[usize]) -> Result<()> {
    for fi in 0..module.functions.len() {
        loop {
            let func = &module.functions[fi];
            let pos = func.body.ops.iter().position(wants_cnm);
            match pos {
                Some(pos) => lower_op(&mut module.functions[fi], pos, wg_dims)?,
                None => break,
            }
        }
    }
    Ok(())
}

fn lower_op(func: &mut Function, pos: usize, wg_dims: &[usize]) -> Result<()> {
    let op = func.body.ops[pos].clone();
    let kind = crate::cinm::CinmOpKind::from_mnemonic(&op.mnemonic);
    if op.is("cinm", "conv2d") || op.is("cinm", "contract") {
        return Err(Error::invalid(format!(
            "rewrite {} into gemm before device lowering",
            op.name()
        )));
    }
    let kind = kind.ok_or_else(|| Error::invalid(format!("unknown cinm op {}", op.name())))?;
    if !crate::cinm::support(kind).cnm {
        return Err(Error::invalid(format!(
            "{} is not CNM-supported (see the cinm support matrix)",
            op.name()
        )));
    }

    let mut bb = BodyBuilder::new(func);
    let finals: Vec<ValueId> = {
        let mut cb = CnmBuilder { bb: &mut bb };
        match op.mnemonic.as_str() {
            "add" | "sub" | "logicop" => lower_elementwise(&mut cb, &op, wg_dims)?,
            "mergePartial" => match op.attr_token("kind") {
                Some("sum") => lower_elementwise(&mut cb, &op, wg_dims)?,
                _ => lower_concat_host(&mut cb, &op)?,
            },
            "gemm" => lower_gemm(&mut cb, &op, wg_dims)?,
            "gemv" => lower_gemv(&mut cb, &op, wg_dims)?,
            "min" | "max" | "reduce" => lower_reduce(&mut cb, &op, wg_dims)?,
            "scan" => lower_scan(&mut cb, &op, wg_dims)?,
            "topk" => lower_topk(&mut cb, &op, wg_dims)?,
            "simSearch" => lower_sim_search(&mut cb, &op, wg_dims)?,
            "histogram" => lower_histogram(&mut cb, &op, wg_dims)?,
            "transpose" => lower_transpose(&mut cb, &op, wg_dims)?,
            "majority" => lower_majority(&mut cb, &op, wg_dims)?,
            other => return Err(Error::invalid(format!("no cnm lowering for cinm.{}", other))),
        }
    };

    // Re-home the original result ids onto the producing generated ops.
    let mut ops = bb.ops;
    for (orig, gen) in op.results.iter().zip(&finals) {
        let producer = ops
            .iter_mut()
            .find(|o| o.results.contains(gen))
            .expect("final value produced in sequence");
        let idx = producer.results.iter().position(|r| r == gen).unwrap();
        producer.results[idx] = *orig;
    }
    func.body.ops.splice(pos..=pos, ops);
    Ok(())
}

/// Flattens, chunks across leaves, applies the op per chunk, gathers, crops.
fn lower_elementwise(cb: &mut CnmBuilder, op: &Op, wg_dims: &[usize]) -> Result<Vec<ValueId>> {
    let a = op.operands[0];
    let ty = cb.bb.tensor_ty(a);
    let total = ty.element_count();
    let leaves: usize = wg_dims.iter().product();
    let plan = chunk_plan(total, leaves);
    let chunk_ty = TensorType::new(vec![plan.chunk], ty.elem);
    let flat_ty = TensorType::new(vec![plan.padded], ty.elem);

    let unary = op.operands.len() == 1;
    let mut host_ins = Vec::new();
    for operand in &op.operands {
        let flat = cb.bb.reshape(*operand, vec![total]);
        let padded = if plan.padded == total {
            flat
        } else {
            let z = cb.bb.splat(flat_ty.clone(), 0);
            let zero = cb.bb.const_i32(0);
            cb.bb.insert_slice(z, flat, &[zero])
        };
        host_ins.push(padded);
    }

    let wg = cb.allocate(wg_dims);
    let map = chunk_map(wg_dims, plan.chunk);
    let mut in_bufs = Vec::new();
    for host in &host_ins {
        let buf = cb.alloc_buffer(wg, chunk_ty.clone(), wg_dims.len());
        cb.scatter(*host, buf, &map);
        in_bufs.push((buf, chunk_ty.clone()));
    }
    let out_buf = cb.alloc_buffer(wg, chunk_ty.clone(), wg_dims.len());
    let mnemonic = op.mnemonic.clone();
    let attrs = op.attrs.clone();
    cb.launch(wg, wg_dims, &in_bufs, &[(out_buf, chunk_ty.clone())], |bb, views| {
        let mut b = OpBuilder::new("cinm", &mnemonic);
        for (k, v) in &attrs {
            if k != "target" {
                b = b.attr(k, v.clone());
            }
        }
        let operands: Vec<ValueId> =
            if unary { vec![views[0]] } else { vec![views[0], views[1]] };
        let r = bb.push1(b.operands(&operands), Type::Tensor(chunk_ty.clone()));
        vec![r]
    });
    let gathered = cb.gather(out_buf, &map, flat_ty);
    let mut result = gathered;
    if plan.padded != total {
        let zero = cb.bb.const_i32(0);
        result = cb.bb.extract_slice(gathered, &[zero], &[total]);
    }
    let out = cb.bb.reshape(result, ty.shape.clone());
    Ok(vec![out])
}

/// mergePartial concat is pure data movement; realize it with host inserts.
fn lower_concat_host(cb: &mut CnmBuilder, op: &Op) -> Result<Vec<ValueId>> {
    let acc = op.operands[0];
    let part = op.operands[1];
    let axis = op.attr_int("axis").unwrap_or(0) as usize;
    let at = cb.bb.tensor_ty(acc);
    let pt = cb.bb.tensor_ty(part);
    let mut shape = at.shape.clone();
    shape[axis] += pt.shape[axis];
    let out0 = cb.bb.splat(TensorType::new(shape.clone(), at.elem), 0);
    let zeros: Vec<ValueId> = (0..shape.len()).map(|_| cb.bb.const_i32(0)).collect();
    let o1 = cb.bb.insert_slice(out0, acc, &zeros);
    let mut offs = zeros.clone();
    offs[axis] = cb.bb.const_i32(at.shape[axis] as i64);
    let o2 = cb.bb.insert_slice(o1, part, &offs);
    Ok(vec![o2])
}

/// Row strips of A scattered to leaves, B broadcast through a root buffer,
/// one gemm per leaf.
fn lower_gemm(cb: &mut CnmBuilder, op: &Op, wg_dims: &[usize]) -> Result<Vec<ValueId>> {
    let a = op.operands[0];
    let b = op.operands[1];
    let (m, k) = match cb.bb.tensor_ty(a).shape.as_slice() {
        [m, k] => (*m, *k),
        _ => unreachable!(),
    };
    let n = cb.bb.tensor_ty(b).shape[1];
    let leaves: usize = wg_dims.iter().product();
    let plan = strip_plan(m, leaves);
    let a_item = TensorType::i32(vec![plan.strip, k]);
    let b_item = TensorType::i32(vec![k, n]);
    let c_item = TensorType::i32(vec![plan.strip, n]);

    let ap = pad_rows(cb.bb, a, plan.padded_rows, k);
    let wg = cb.allocate(wg_dims);
    let a_buf = cb.alloc_buffer(wg, a_item.clone(), wg_dims.len());
    cb.scatter(ap, a_buf, &strip_map(wg_dims, plan.strip, k));
    let b_buf = cb.alloc_buffer(wg, b_item.clone(), 0);
    cb.scatter(b, b_buf, &root_map(&[k, n]));
    let c_buf = cb.alloc_buffer(wg, c_item.clone(), wg_dims.len());
    let (strip, n_) = (plan.strip, n);
    cb.launch(
        wg,
        wg_dims,
        &[(a_buf, a_item), (b_buf, b_item)],
        &[(c_buf, c_item.clone())],
        |bb, views| {
            let r = bb.push1(
                OpBuilder::new("cinm", "gemm").operands(&[views[0], views[1]]),
                TensorType::i32(vec![strip, n_]).into(),
            );
            vec![r]
        },
    );
    let gathered = cb.gather(
        c_buf,
        &strip_map(wg_dims, plan.strip, n),
        TensorType::i32(vec![plan.padded_rows, n]),
    );
    let result = crop_rows(cb.bb, gathered, m, n, plan.padded_rows);
    Ok(vec![result])
}

fn lower_gemv(cb: &mut CnmBuilder, op: &Op, wg_dims: &[usize]) -> Result<Vec<ValueId>> {
    let a = op.operands[0];
    let x = op.operands[1];
    let (m, k) = match cb.bb.tensor_ty(a).shape.as_slice() {
        [m, k] => (*m, *k),
        _ => unreachable!(),
    };
    let leaves: usize = wg_dims.iter().product();
    let plan = strip_plan(m, leaves);
    let a_item = TensorType::i32(vec![plan.strip, k]);
    let x_item = TensorType::i32(vec![k]);
    let o_item = TensorType::i32(vec![plan.strip]);

    let ap = pad_rows(cb.bb, a, plan.padded_rows, k);
    let wg = cb.allocate(wg_dims);
    let a_buf = cb.alloc_buffer(wg, a_item.clone(), wg_dims.len());
    cb.scatter(ap, a_buf, &strip_map(wg_dims, plan.strip, k));
    let x_buf = cb.alloc_buffer(wg, x_item.clone(), 0);
    cb.scatter(x, x_buf, &root_map(&[k]));
    let o_buf = cb.alloc_buffer(wg, o_item.clone(), wg_dims.len());
    let strip = plan.strip;
    cb.launch(
        wg,
        wg_dims,
        &[(a_buf, a_item), (x_buf, x_item)],
        &[(o_buf, o_item.clone())],
        |bb, views| {
            let r = bb.push1(
                OpBuilder::new("cinm", "gemv").operands(&[views[0], views[1]]),
                TensorType::i32(vec![strip]).into(),
            );
            vec![r]
        },
    );
    let gathered = cb.gather(
        o_buf,
        &chunk_map(wg_dims, plan.strip),
        TensorType::i32(vec![plan.padded_rows]),
    );
    let mut result = gathered;
    if plan.padded_rows != m {
        let zero = cb.bb.const_i32(0);
        result = cb.bb.extract_slice(gathered, &[zero], &[m]);
    }
    Ok(vec![result])
}

/// Per-leaf partial reductions plus a single-leaf combine stage.
fn lower_reduce(cb: &mut CnmBuilder, op: &Op, wg_dims: &[usize]) -> Result<Vec<ValueId>> {
    let kind = match op.mnemonic.as_str() {
        "min" => ReduceKind::Min,
        "max" => ReduceKind::Max,
        _ => ReduceKind::parse(op.attr_token("op").unwrap())?,
    };
    let src = op.operands[0];
    let total = cb.bb.tensor_ty(src).element_count();
    let leaves: usize = wg_dims.iter().product();
    let l1 = merge_stage_leaves(total, leaves, 1, 1);
    let wg1_dims = vec![l1];
    let plan = chunk_plan(total, l1);
    let chunk_ty = TensorType::i32(vec![plan.chunk]);
    let scalar = TensorType::scalar(ElemKind::I32);

    let flat = cb.bb.reshape(src, vec![total]);
    let padded = pad_flat(cb.bb, flat, plan.padded, kind.identity());
    let wg1 = cb.allocate(&wg1_dims);
    let in_buf = cb.alloc_buffer(wg1, chunk_ty.clone(), 1);
    cb.scatter(padded, in_buf, &chunk_map(&wg1_dims, plan.chunk));
    let part_buf = cb.alloc_buffer(wg1, scalar.clone(), 1);
    let body_op = leaf_reduce_builder(op, kind);
    cb.launch(wg1, &wg1_dims, &[(in_buf, chunk_ty)], &[(part_buf, scalar.clone())], |bb, views| {
        let r = bb.push1(body_op.operands(&[views[0]]), Type::Tensor(scalar.clone()));
        vec![r]
    });
    let partials = cb.gather(part_buf, &chunk_map(&wg1_dims, 1), TensorType::i32(vec![l1]));

    // Stage 2: one leaf reduces the partial vector.
    let wg2_dims = vec![1usize];
    let part_ty = TensorType::i32(vec![l1]);
    let wg2 = cb.allocate(&wg2_dims);
    let in2 = cb.alloc_buffer(wg2, part_ty.clone(), 1);
    cb.scatter(partials, in2, &chunk_map(&wg2_dims, l1));
    let out2 = cb.alloc_buffer(wg2, scalar.clone(), 1);
    let body_op = leaf_reduce_builder(op, kind);
    cb.launch(wg2, &wg2_dims, &[(in2, part_ty)], &[(out2, scalar.clone())], |bb, views| {
        let r = bb.push1(body_op.operands(&[views[0]]), Type::Tensor(scalar.clone()));
        vec![r]
    });
    let result = cb.gather(out2, &chunk_map(&wg2_dims, 1), scalar);
    Ok(vec![result])
}

/// Reduce body op for min/max/reduce, preserving the original mnemonic.
fn leaf_reduce_builder(op: &Op, kind: ReduceKind) -> OpBuilder {
    match op.mnemonic.as_str() {
        "min" => OpBuilder::new("cinm", "min"),
        "max" => OpBuilder::new("cinm", "max"),
        _ => OpBuilder::new("cinm", "reduce").attr_token(
            "op",
            match kind {
                ReduceKind::Sum => "sum",
                ReduceKind::Prod => "prod",
                ReduceKind::Min => "min",
                ReduceKind::Max => "max",
            },
        ),
    }
}

/// Three-stage distributed inclusive scan for the sum kind: local scans and
/// totals, a single-leaf exclusive-offset stage, then a chunked combine. The
/// non-sum kinds run on a single leaf (no elementwise combiner exists for
/// them in the op set).
fn lower_scan(cb: &mut CnmBuilder, op: &Op, wg_dims: &[usize]) -> Result<Vec<ValueId>> {
    let kind = ReduceKind::parse(op.attr_token("op").unwrap())?;
    let src = op.operands[0];
    let n = cb.bb.tensor_ty(src).shape[0];

    if kind != ReduceKind::Sum {
        let item = TensorType::i32(vec![n]);
        let wg_one = vec![1usize];
        let wg = cb.allocate(&wg_one);
        let in_buf = cb.alloc_buffer(wg, item.clone(), 1);
        cb.scatter(src, in_buf, &chunk_map(&wg_one, n));
        let out_buf = cb.alloc_buffer(wg, item.clone(), 1);
        let kt = op.attr_token("op").unwrap().to_string();
        let item2 = item.clone();
        cb.launch(wg, &wg_one, &[(in_buf, item.clone())], &[(out_buf, item.clone())], |bb, v| {
            let r = bb.push1(
                OpBuilder::new("cinm", "scan").operands(&[v[0]]).attr_token("op", &kt),
                Type::Tensor(item2.clone()),
            );
            vec![r]
        });
        let out = cb.gather(out_buf, &chunk_map(&wg_one, n), item);
        return Ok(vec![out]);
    }

    let leaves: usize = wg_dims.iter().product();
    let l1 = merge_stage_leaves(n, leaves, 1, 1);
    let wg1_dims = vec![l1];
    let plan = chunk_plan(n, l1);
    let chunk_ty = TensorType::i32(vec![plan.chunk]);
    let scalar = TensorType::scalar(ElemKind::I32);

    let padded = pad_flat(cb.bb, src, plan.padded, 0);
    let wg1 = cb.allocate(&wg1_dims);
    let in1 = cb.alloc_buffer(wg1, chunk_ty.clone(), 1);
    cb.scatter(padded, in1, &chunk_map(&wg1_dims, plan.chunk));
    let scans = cb.alloc_buffer(wg1, chunk_ty.clone(), 1);
    let totals = cb.alloc_buffer(wg1, scalar.clone(), 1);
    let chunk_ty2 = chunk_ty.clone();
    let scalar2 = scalar.clone();
    cb.launch(
        wg1,
        &wg1_dims,
        &[(in1, chunk_ty.clone())],
        &[(scans, chunk_ty.clone()), (totals, scalar.clone())],
        |bb, views| {
            let s = bb.push1(
                OpBuilder::new("cinm", "scan").operands(&[views[0]]).attr_token("op", "sum"),
                Type::Tensor(chunk_ty2.clone()),
            );
            let t = bb.push1(
                OpBuilder::new("cinm", "reduce").operands(&[views[0]]).attr_token("op", "sum"),
                Type::Tensor(scalar2.clone()),
            );
            vec![s, t]
        },
    );
    let local_scans =
        cb.gather(scans, &chunk_map(&wg1_dims, plan.chunk), TensorType::i32(vec![plan.padded]));
    let tot_host = cb.gather(totals, &chunk_map(&wg1_dims, 1), TensorType::i32(vec![l1]));

    // Stage 2: exclusive offsets = inclusive_scan(totals) - totals.
    let wg2_dims = vec![1usize];
    let tot_ty = TensorType::i32(vec![l1]);
    let wg2 = cb.allocate(&wg2_dims);
    let in2 = cb.alloc_buffer(wg2, tot_ty.clone(), 1);
    cb.scatter(tot_host, in2, &chunk_map(&wg2_dims, l1));
    let ex2 = cb.alloc_buffer(wg2, tot_ty.clone(), 1);
    let tot_ty2 = tot_ty.clone();
    cb.launch(wg2, &wg2_dims, &[(in2, tot_ty.clone())], &[(ex2, tot_ty.clone())], |bb, views| {
        let s = bb.push1(
            OpBuilder::new("cinm", "scan").operands(&[views[0]]).attr_token("op", "sum"),
            Type::Tensor(tot_ty2.clone()),
        );
        let e = bb.push1(
            OpBuilder::new("cinm", "sub").operands(&[s, views[0]]),
            Type::Tensor(tot_ty2.clone()),
        );
        vec![e]
    });
    let ex_host = cb.gather(ex2, &chunk_map(&wg2_dims, l1), tot_ty);

    // Stage 3: add each leaf's exclusive offset to its local scan chunk.
    let wg3 = cb.allocate(&wg1_dims);
    let s_in = cb.alloc_buffer(wg3, chunk_ty.clone(), 1);
    cb.scatter(local_scans, s_in, &chunk_map(&wg1_dims, plan.chunk));
    let e_in = cb.alloc_buffer(wg3, scalar.clone(), 1);
    cb.scatter(ex_host, e_in, &chunk_map(&wg1_dims, 1));
    let out3 = cb.alloc_buffer(wg3, chunk_ty.clone(), 1);
    let chunk_ty3 = chunk_ty.clone();
    cb.launch(
        wg3,
        &wg1_dims,
        &[(s_in, chunk_ty.clone()), (e_in, scalar.clone())],
        &[(out3, chunk_ty.clone())],
        |bb, views| {
            let sp = bb.splat_dyn(chunk_ty3.clone(), views[1]);
            let r = bb.push1(
                OpBuilder::new("cinm", "add").operands(&[views[0], sp]),
                Type::Tensor(chunk_ty3.clone()),
            );
            vec![r]
        },
    );
    let gathered =
        cb.gather(out3, &chunk_map(&wg1_dims, plan.chunk), TensorType::i32(vec![plan.padded]));
    let mut result = gathered;
    if plan.padded != n {
        let zero = cb.bb.const_i32(0);
        result = cb.bb.extract_slice(gathered, &[zero], &[n]);
    }
    Ok(vec![result])
}

/// Per-leaf local top-k candidates merged on a single leaf; local indices are
/// globalized with a per-leaf offset table before the final selection.
fn lower_topk(cb: &mut CnmBuilder, op: &Op, wg_dims: &[usize]) -> Result<Vec<ValueId>> {
    let k = op.attr_int("k").unwrap() as usize;
    let src = op.operands[0];
    let n = cb.bb.tensor_ty(src).shape[0];
    let leaves: usize = wg_dims.iter().product();
    let l1 = merge_stage_leaves(n, leaves, 3 * k, k);
    let wg1_dims = vec![l1];
    let plan = chunk_plan(n, l1);
    let chunk_ty = TensorType::i32(vec![plan.chunk]);
    let k_ty = TensorType::i32(vec![k]);

    let padded = pad_flat(cb.bb, src, plan.padded, i32::MIN);
    let wg1 = cb.allocate(&wg1_dims);
    let in1 = cb.alloc_buffer(wg1, chunk_ty.clone(), 1);
    cb.scatter(padded, in1, &chunk_map(&wg1_dims, plan.chunk));
    let vals1 = cb.alloc_buffer(wg1, k_ty.clone(), 1);
    let idxs1 = cb.alloc_buffer(wg1, k_ty.clone(), 1);
    let k_ty2 = k_ty.clone();
    cb.launch(
        wg1,
        &wg1_dims,
        &[(in1, chunk_ty)],
        &[(vals1, k_ty.clone()), (idxs1, k_ty.clone())],
        |bb, views| {
            let (vop, _) = OpBuilder::new("cinm", "topk")
                .operands(&[views[0]])
                .attr_int("k", k as i64)
                .results(bb.func, &[Type::Tensor(k_ty2.clone()), Type::Tensor(k_ty2.clone())]);
            let ids = vop.results.clone();
            bb.ops.push(vop);
            vec![ids[0], ids[1]]
        },
    );
    let ck_ty = TensorType::i32(vec![l1 * k]);
    let cand_vals = cb.gather(vals1, &chunk_map(&wg1_dims, k), ck_ty.clone());
    let cand_idxs = cb.gather(idxs1, &chunk_map(&wg1_dims, k), ck_ty.clone());

    // Stage 2: single-leaf merge.
    let wg2_dims = vec![1usize];
    let wg2 = cb.allocate(&wg2_dims);
    let v_in = cb.alloc_buffer(wg2, ck_ty.clone(), 1);
    cb.scatter(cand_vals, v_in, &chunk_map(&wg2_dims, l1 * k));
    let i_in = cb.alloc_buffer(wg2, ck_ty.clone(), 1);
    cb.scatter(cand_idxs, i_in, &chunk_map(&wg2_dims, l1 * k));
    let v_out = cb.alloc_buffer(wg2, k_ty.clone(), 1);
    let i_out = cb.alloc_buffer(wg2, k_ty.clone(), 1);
    let offsets: Vec<i64> =
        (0..l1).flat_map(|l| std::iter::repeat((l * plan.chunk) as i64).take(k)).collect();
    let ck_ty2 = ck_ty.clone();
    let k_ty3 = k_ty.clone();
    cb.launch(
        wg2,
        &wg2_dims,
        &[(v_in, ck_ty.clone()), (i_in, ck_ty)],
        &[(v_out, k_ty.clone()), (i_out, k_ty.clone())],
        |bb, views| {
            let off = bb.const_list(ck_ty2.clone(), offsets);
            let gidx = bb.push1(
                OpBuilder::new("cinm", "add").operands(&[views[1], off]),
                Type::Tensor(ck_ty2.clone()),
            );
            let (top, _) = OpBuilder::new("cinm", "topk")
                .operands(&[views[0]])
                .attr_int("k", k as i64)
                .results(bb.func, &[Type::Tensor(k_ty3.clone()), Type::Tensor(k_ty3.clone())]);
            let ids = top.results.clone();
            bb.ops.push(top);
            let fi = bb.push1(
                OpBuilder::new("core", "gather").operands(&[gidx, ids[1]]),
                Type::Tensor(k_ty3.clone()),
            );
            vec![ids[0], fi]
        },
    );
    let fvals = cb.gather(v_out, &chunk_map(&wg2_dims, k), k_ty.clone());
    let fidxs = cb.gather(i_out, &chunk_map(&wg2_dims, k), k_ty);
    Ok(vec![fvals, fidxs])
}

/// Row strips of the corpus with the query broadcast; per-leaf candidates are
/// merged like topk. The dot metric ranks descending, matching the candidate
/// merge; l2 runs on a single leaf instead.
fn lower_sim_search(cb: &mut CnmBuilder, op: &Op, wg_dims: &[usize]) -> Result<Vec<ValueId>> {
    let count = op.attr_int("count").unwrap() as usize;
    let metric = op.attr_token("metric").unwrap().to_string();
    let query = op.operands[0];
    let corpus = op.operands[1];
    let (n, width) = match cb.bb.tensor_ty(corpus).shape.as_slice() {
        [n, w] => (*n, *w),
        _ => unreachable!(),
    };
    let leaves: usize = wg_dims.iter().product();
    let l1 = if metric == "dot" { divisor_leaves(n, leaves, count, 3 * count) } else { 1 };
    let rows_per = n / l1;
    let wg1_dims = vec![l1];
    let corpus_item = TensorType::i32(vec![rows_per, width]);
    let q_item = TensorType::i32(vec![width]);
    let c_ty = TensorType::i32(vec![count]);

    let wg1 = cb.allocate(&wg1_dims);
    let corpus_buf = cb.alloc_buffer(wg1, corpus_item.clone(), 1);
    cb.scatter(corpus, corpus_buf, &strip_map(&wg1_dims, rows_per, width));
    let q_buf = cb.alloc_buffer(wg1, q_item.clone(), 0);
    cb.scatter(query, q_buf, &root_map(&[width]));
    let s1 = cb.alloc_buffer(wg1, c_ty.clone(), 1);
    let i1 = cb.alloc_buffer(wg1, c_ty.clone(), 1);
    let metric2 = metric.clone();
    let c_ty2 = c_ty.clone();
    cb.launch(
        wg1,
        &wg1_dims,
        &[(q_buf, q_item), (corpus_buf, corpus_item)],
        &[(s1, c_ty.clone()), (i1, c_ty.clone())],
        |bb, views| {
            let (search, _) = OpBuilder::new("cinm", "simSearch")
                .operands(&[views[0], views[1]])
                .attr_token("metric", &metric2)
                .attr_int("count", count as i64)
                .results(bb.func, &[Type::Tensor(c_ty2.clone()), Type::Tensor(c_ty2.clone())]);
            let ids = search.results.clone();
            bb.ops.push(search);
            vec![ids[0], ids[1]]
        },
    );

    if l1 == 1 {
        let fscores = cb.gather(s1, &chunk_map(&wg1_dims, count), c_ty.clone());
        let fidxs = cb.gather(i1, &chunk_map(&wg1_dims, count), c_ty);
        return Ok(vec![fscores, fidxs]);
    }

    let ck_ty = TensorType::i32(vec![l1 * count]);
    let cand_scores = cb.gather(s1, &chunk_map(&wg1_dims, count), ck_ty.clone());
    let cand_idxs = cb.gather(i1, &chunk_map(&wg1_dims, count), ck_ty.clone());
    let wg2_dims = vec![1usize];
    let wg2 = cb.allocate(&wg2_dims);
    let s_in = cb.alloc_buffer(wg2, ck_ty.clone(), 1);
    cb.scatter(cand_scores, s_in, &chunk_map(&wg2_dims, l1 * count));
    let i_in = cb.alloc_buffer(wg2, ck_ty.clone(), 1);
    cb.scatter(cand_idxs, i_in, &chunk_map(&wg2_dims, l1 * count));
    let s_out = cb.alloc_buffer(wg2, c_ty.clone(), 1);
    let i_out = cb.alloc_buffer(wg2, c_ty.clone(), 1);
    let offsets: Vec<i64> =
        (0..l1).flat_map(|l| std::iter::repeat((l * rows_per) as i64).take(count)).collect();
    let ck_ty2 = ck_ty.clone();
    let c_ty3 = c_ty.clone();
    cb.launch(
        wg2,
        &wg2_dims,
        &[(s_in, ck_ty.clone()), (i_in, ck_ty)],
        &[(s_out, c_ty.clone()), (i_out, c_ty.clone())],
        |bb, views| {
            let off = bb.const_list(ck_ty2.clone(), offsets);
            let gidx = bb.push1(
                OpBuilder::new("cinm", "add").operands(&[views[1], off]),
                Type::Tensor(ck_ty2.clone()),
            );
            let (top, _) = OpBuilder::new("cinm", "topk")
                .operands(&[views[0]])
                .attr_int("k", count as i64)
                .results(bb.func, &[Type::Tensor(c_ty3.clone()), Type::Tensor(c_ty3.clone())]);
            let ids = top.results.clone();
            bb.ops.push(top);
            let fi = bb.push1(
                OpBuilder::new("core", "gather").operands(&[gidx, ids[1]]),
                Type::Tensor(c_ty3.clone()),
            );
            vec![ids[0], fi]
        },
    );
    let fscores = cb.gather(s_out, &chunk_map(&wg2_dims, count), c_ty.clone());
    let fidxs = cb.gather(i_out, &chunk_map(&wg2_dims, count), c_ty);
    Ok(vec![fscores, fidxs])
}

/// Per-leaf local histograms merged on one leaf; the zero padding's bin-0
/// contribution is subtracted with a compile-time correction.
fn lower_histogram(cb: &mut CnmBuilder, op: &Op, wg_dims: &[usize]) -> Result<Vec<ValueId>> {
    let bins = op.attr_int("bins").unwrap() as usize;
    let src = op.operands[0];
    let total = cb.bb.tensor_ty(src).element_count();
    let leaves: usize = wg_dims.iter().product();
    let l1 = merge_stage_leaves(total, leaves, bins, 1);
    let wg1_dims = vec![l1];
    let plan = chunk_plan(total, l1);
    let chunk_ty = TensorType::i32(vec![plan.chunk]);
    let b_ty = TensorType::i32(vec![bins]);

    let flat = cb.bb.reshape(src, vec![total]);
    let padded = pad_flat(cb.bb, flat, plan.padded, 0);
    let wg1 = cb.allocate(&wg1_dims);
    let in1 = cb.alloc_buffer(wg1, chunk_ty.clone(), 1);
    cb.scatter(padded, in1, &chunk_map(&wg1_dims, plan.chunk));
    let h1 = cb.alloc_buffer(wg1, b_ty.clone(), 1);
    let b_ty2 = b_ty.clone();
    cb.launch(wg1, &wg1_dims, &[(in1, chunk_ty)], &[(h1, b_ty.clone())], |bb, views| {
        let r = bb.push1(
            OpBuilder::new("cinm", "histogram")
                .operands(&[views[0]])
                .attr_int("bins", bins as i64),
            Type::Tensor(b_ty2.clone()),
        );
        vec![r]
    });
    let parts =
        cb.gather(h1, &chunk_map(&wg1_dims, bins), TensorType::i32(vec![l1 * bins]));

    // Stage 2: single leaf sums the partial histograms and subtracts the
    // padding correction.
    let wg2_dims = vec![1usize];
    let mat_ty = TensorType::i32(vec![l1, bins]);
    let wg2 = cb.allocate(&wg2_dims);
    let in2 = cb.alloc_buffer(wg2, mat_ty.clone(), 1);
    cb.scatter(parts, in2, &chunk_map(&wg2_dims, l1 * bins));
    let out2 = cb.alloc_buffer(wg2, b_ty.clone(), 1);
    let padcount = (plan.padded - total) as i64;
    let b_ty3 = b_ty.clone();
    cb.launch(wg2, &wg2_dims, &[(in2, mat_ty)], &[(out2, b_ty.clone())], |bb, views| {
        let acc0 = bb.splat(b_ty3.clone(), 0);
        let merged = bb.for_loop((0, l1 as i64, 1), &[acc0], |bb, iv, args| {
            let zero = bb.const_i32(0);
            let row = bb.extract_slice(views[0], &[iv, zero], &[1, bins]);
            let row_flat = bb.reshape(row, vec![bins]);
            let m = bb.push1(
                OpBuilder::new("cinm", "mergePartial")
                    .operands(&[args[0], row_flat])
                    .attr_token("kind", "sum"),
                Type::Tensor(b_ty3.clone()),
            );
            vec![m]
        })[0];
        let mut corr = vec![0i64; bins];
        corr[0] = padcount;
        let c = bb.const_list(b_ty3.clone(), corr);
        let r = bb.push1(
            OpBuilder::new("cinm", "sub").operands(&[merged, c]),
            Type::Tensor(b_ty3.clone()),
        );
        vec![r]
    });
    let result = cb.gather(out2, &chunk_map(&wg2_dims, bins), b_ty);
    Ok(vec![result])
}

/// Row strips transposed per leaf; the gather map lays the transposed blocks
/// into the output, so the transpose is realized by data movement.
fn lower_transpose(cb: &mut CnmBuilder, op: &Op, wg_dims: &[usize]) -> Result<Vec<ValueId>> {
    let src = op.operands[0];
    let (m, w) = match cb.bb.tensor_ty(src).shape.as_slice() {
        [m, w] => (*m, *w),
        _ => unreachable!(),
    };
    let elem = cb.bb.tensor_ty(src).elem;
    let leaves: usize = wg_dims.iter().product();
    let plan = strip_plan(m, leaves);
    let in_item = TensorType::new(vec![plan.strip, w], elem);
    let out_item = TensorType::new(vec![w, plan.strip], elem);

    let padded = pad_rows(cb.bb, src, plan.padded_rows, w);
    let wg = cb.allocate(wg_dims);
    let in_buf = cb.alloc_buffer(wg, in_item.clone(), wg_dims.len());
    cb.scatter(padded, in_buf, &strip_map(wg_dims, plan.strip, w));
    let out_buf = cb.alloc_buffer(wg, out_item.clone(), wg_dims.len());
    let out_item2 = out_item.clone();
    cb.launch(wg, wg_dims, &[(in_buf, in_item)], &[(out_buf, out_item.clone())], |bb, views| {
        let r = bb.push1(
            OpBuilder::new("cinm", "transpose").operands(&[views[0]]),
            Type::Tensor(out_item2.clone()),
        );
        vec![r]
    });
    let gathered = cb.gather(
        out_buf,
        &transpose_map(wg_dims, plan.strip, w, plan.padded_rows),
        TensorType::new(vec![w, plan.padded_rows], elem),
    );
    let mut result = gathered;
    if plan.padded_rows != m {
        let zeros = [cb.bb.const_i32(0), cb.bb.const_i32(0)];
        result = cb.bb.extract_slice(gathered, &zeros, &[w, m]);
    }
    Ok(vec![result])
}

/// Per-leaf one-counts followed by a single-leaf threshold compare.
fn lower_majority(cb: &mut CnmBuilder, op: &Op, wg_dims: &[usize]) -> Result<Vec<ValueId>> {
    let src = op.operands[0];
    let n = cb.bb.tensor_ty(src).shape[0];
    let leaves: usize = wg_dims.iter().product();
    let l1 = merge_stage_leaves(n, leaves, 1, 1);
    let wg1_dims = vec![l1];
    let plan = chunk_plan(n, l1);
    let chunk_ty = TensorType::i1(vec![plan.chunk]);
    let scalar = TensorType::scalar(ElemKind::I32);
    let scalar_b = TensorType::scalar(ElemKind::I1);

    let padded = pad_flat(cb.bb, src, plan.padded, 0);
    let wg1 = cb.allocate(&wg1_dims);
    let in1 = cb.alloc_buffer(wg1, chunk_ty.clone(), 1);
    cb.scatter(padded, in1, &chunk_map(&wg1_dims, plan.chunk));
    let counts = cb.alloc_buffer(wg1, scalar.clone(), 1);
    let scalar2 = scalar.clone();
    cb.launch(wg1, &wg1_dims, &[(in1, chunk_ty)], &[(counts, scalar.clone())], |bb, views| {
        let widened = bb.cast(views[0], ElemKind::I32);
        let r = bb.push1(
            OpBuilder::new("cinm", "reduce").operands(&[widened]).attr_token("op", "sum"),
            Type::Tensor(scalar2.clone()),
        );
        vec![r]
    });
    let partials = cb.gather(counts, &chunk_map(&wg1_dims, 1), TensorType::i32(vec![l1]));

    let wg2_dims = vec![1usize];
    let part_ty = TensorType::i32(vec![l1]);
    let wg2 = cb.allocate(&wg2_dims);
    let in2 = cb.alloc_buffer(wg2, part_ty.clone(), 1);
    cb.scatter(partials, in2, &chunk_map(&wg2_dims, l1));
    let out2 = cb.alloc_buffer(wg2, scalar_b.clone(), 1);
    let scalar3 = scalar.clone();
    let scalar_b2 = scalar_b.clone();
    cb.launch(wg2, &wg2_dims, &[(in2, part_ty)], &[(out2, scalar_b.clone())], |bb, views| {
        let tot = bb.push1(
            OpBuilder::new("cinm", "reduce").operands(&[views[0]]).attr_token("op", "sum"),
            Type::Tensor(scalar3.clone()),
        );
        let doubled = bb.addi(tot, tot);
        let thr = bb.const_i32(n as i64);
        let r = bb.push1(
            OpBuilder::new("core", "cmpi").operands(&[doubled, thr]).attr_token("pred", "gt"),
            Type::Tensor(scalar_b2.clone()),
        );
        vec![r]
    });
    let result = cb.gather(out2, &chunk_map(&wg2_dims, 1), scalar_b);
    Ok(vec![result])
}

// ---- small host-side glue ---------------------------------------------------

fn pad_rows(bb: &mut BodyBuilder, v: ValueId, padded_rows: usize, width: usize) -> ValueId {
    let t = bb.tensor_ty(v);
    if t.shape[0] == padded_rows {
        return v;
    }
    let z = bb.splat(TensorType::new(vec![padded_rows, width], t.elem), 0);
    let zero = bb.const_i32(0);
    let zero2 = bb.const_i32(0);
    bb.insert_slice(z, v, &[zero, zero2])
}

fn crop_rows(
    bb: &mut BodyBuilder,
    v: ValueId,
    rows: usize,
    width: usize,
    padded_rows: usize,
) -> ValueId {
    if rows == padded_rows {
        return v;
    }
    let zero = bb.const_i32(0);
    let zero2 = bb.const_i32(0);
    bb.extract_slice(v, &[zero, zero2], &[rows, width])
}

fn pad_flat(bb: &mut BodyBuilder, v: ValueId, padded: usize, pad: i32) -> ValueId {
    let t = bb.tensor_ty(v);
    if t.element_count() == padded {
        return v;
    }
    let z = bb.splat(TensorType::new(vec![padded], t.elem), pad as i64);
    let zero = bb.const_i32(0);
    bb.insert_slice(z, v, &[zero])
}
