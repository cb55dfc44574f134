//! Shared transformation library: the generic tiling interface (box and
//! rectangular shapes), loop interchange and unrolling over the canonical
//! tile nests, and tensor-to-buffer conversion.
//!
//! Tiled GEMM nests are perfectly nested counted loops each threading one
//! accumulator tensor; every iteration reads and merges a disjoint or
//! sum-merged region, so any loop permutation is semantics-preserving by
//! construction, which is what `interchange` relies on.

use crate::coreops::{check_permutation, BodyBuilder};
use crate::error::{Error, Result};
use crate::ir::types::TensorType;
use crate::ir::{Attr, Function, Module, Op, OpBuilder, ValueId};
use crate::pass::PassSpec;
use crate::semantics::ReduceKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TileShape {
    /// Tile both gemm output dimensions plus the reduction dimension;
    /// partials are sum-merged over the reduction tiles.
    Box,
    /// Tile only the leading dimension into full-width strips; partials are
    /// disjoint and concatenate along the output rows.
    Rect,
}

#[derive(Clone, Debug)]
pub struct TileSpec {
    pub shape: TileShape,
    pub sizes: Vec<usize>,
    pub pad_value: i32,
}

impl TileSpec {
    pub fn new(shape: TileShape, sizes: Vec<usize>) -> TileSpec {
        TileSpec { shape, sizes, pad_value: 0 }
    }
}

/// Handle for a generated loop nest: position of the root loop in the
/// function body and its depth.
#[derive(Clone, Copy, Debug)]
pub struct NestRef {
    pub root: usize,
    pub depth: usize,
}

fn ceil_div(a: usize, b: usize) -> usize {
    (a + b - 1) / b
}

/// Pads `v` (tensor) up to `shape` with `pad` when needed.
fn pad_to(bb: &mut BodyBuilder, v: ValueId, shape: &[usize], pad: i32) -> ValueId {
    let t = bb.tensor_ty(v);
    if t.shape == shape {
        return v;
    }
    let padded = bb.splat(TensorType::new(shape.to_vec(), t.elem), pad as i64);
    let zero_offs: Vec<ValueId> = (0..shape.len()).map(|_| bb.const_i32(0)).collect();
    bb.insert_slice(padded, v, &zero_offs)
}

fn crop_to(bb: &mut BodyBuilder, v: ValueId, shape: &[usize]) -> ValueId {
    let t = bb.tensor_ty(v);
    if t.shape == shape {
        return v;
    }
    let offs: Vec<ValueId> = (0..shape.len()).map(|_| bb.const_i32(0)).collect();
    bb.extract_slice(v, &offs, shape)
}

/// The operations the generic tiling interface accepts. Ops the tiling
/// itself emitted (the final partial-combining reduce) are excluded.
pub fn is_tileable(op: &Op) -> bool {
    op.dialect == "cinm"
        && matches!(op.mnemonic.as_str(), "gemm" | "gemv" | "add" | "sub" | "reduce")
        && !op.attrs.contains_key("tiled")
        && !op.attrs.contains_key("dst")
}

/// Replaces the op at `pos` in the function body with a tile loop nest that
/// computes the same value. Non-divisible extents are padded with the
/// identity element and the result is cropped back.
pub fn tile_op(func: &mut Function, pos: usize, spec: &TileSpec) -> Result<NestRef> {
    let op = func.body.ops[pos].clone();
    if !is_tileable(&op) {
        return Err(Error::invalid(format!("{} is not tileable", op.name())));
    }
    if spec.sizes.iter().any(|s| *s == 0) {
        return Err(Error::invalid("tile sizes must be positive"));
    }
    let result_id = op.results[0];
    let mut bb = BodyBuilder::new(func);
    let (nest_offset, depth) = match op.mnemonic.as_str() {
        "gemm" => tile_gemm(&mut bb, &op, spec)?,
        "gemv" => tile_gemv(&mut bb, &op, spec)?,
        "add" | "sub" => tile_elementwise(&mut bb, &op, spec)?,
        "reduce" => tile_reduce(&mut bb, &op, spec)?,
        _ => unreachable!(),
    };
    let mut ops = bb.ops;
    // The final generated op takes over the original result id so downstream
    // uses keep working.
    let last = ops.last_mut().unwrap();
    last.results[0] = result_id;
    let root = pos + nest_offset;
    func.body.ops.splice(pos..=pos, ops);
    Ok(NestRef { root, depth })
}

/// Emits the canonical tiled gemm. Returns (index of the root loop within
/// the emitted ops, nest depth).
fn tile_gemm(bb: &mut BodyBuilder, op: &Op, spec: &TileSpec) -> Result<(usize, usize)> {
    if spec.pad_value != 0 {
        return Err(Error::invalid("gemm tiling requires the additive identity as padding"));
    }
    let a = op.operands[0];
    let b = op.operands[1];
    let (m, k) = match bb.tensor_ty(a).shape.as_slice() {
        [m, k] => (*m, *k),
        _ => unreachable!(),
    };
    let n = bb.tensor_ty(b).shape[1];
    match spec.shape {
        TileShape::Box => {
            let [tm, tn, tk] = match spec.sizes.as_slice() {
                [tm, tn, tk, ..] => [*tm, *tn, *tk],
                _ => return Err(Error::invalid("box gemm tiling needs sizes m x n x k")),
            };
            let (nm, nn, nk) = (ceil_div(m, tm), ceil_div(n, tn), ceil_div(k, tk));
            let ap = pad_to(bb, a, &[nm * tm, nk * tk], 0);
            let bp = pad_to(bb, b, &[nk * tk, nn * tn], 0);
            let acc0 = bb.splat(TensorType::i32(vec![nm * tm, nn * tn]), 0);
            let nest_root = bb.ops.len();
            let result = emit_box_gemm_nest(bb, ap, bp, acc0, [nm, nn, nk], [tm, tn, tk]);
            let cropped = crop_to(bb, result, &[m, n]);
            if cropped == result {
                // Nothing was padded; alias through a reshape so the caller
                // can re-home the result id onto the final op.
                bb.reshape(result, vec![m, n]);
            }
            Ok((nest_root, 3))
        }
        TileShape::Rect => {
            let tm = *spec.sizes.first().ok_or_else(|| Error::invalid("missing strip size"))?;
            let nm = ceil_div(m, tm);
            let ap = pad_to(bb, a, &[nm * tm, k], 0);
            let acc0 = bb.splat(TensorType::i32(vec![nm * tm, n]), 0);
            let nest_root = bb.ops.len();
            let result = bb.for_loop((0, nm as i64, 1), &[acc0], |bb, iv, args| {
                let c_tm = bb.const_i32(tm as i64);
                let ri = bb.muli(iv, c_tm);
                let zero = bb.const_i32(0);
                let a_t = bb.extract_slice(ap, &[ri, zero], &[tm, k]);
                let p = bb.push1(
                    OpBuilder::new("cinm", "gemm").operands(&[a_t, b]),
                    TensorType::i32(vec![tm, n]).into(),
                );
                vec![bb.insert_slice(args[0], p, &[ri, zero])]
            })[0];
            tag_nest(bb, nest_root, "gemm_rect", 1);
            let cropped = crop_to(bb, result, &[m, n]);
            if cropped == result {
                bb.reshape(result, vec![m, n]);
            }
            Ok((nest_root, 1))
        }
    }
}

/// The canonical box-tiled gemm nest, shared with the cim lowering. Loop
/// order is (row tiles, column tiles, reduction tiles); the body extracts
/// both tiles, multiplies, and sum-merges into the accumulator region.
pub fn emit_box_gemm_nest(
    bb: &mut BodyBuilder,
    ap: ValueId,
    bp: ValueId,
    acc0: ValueId,
    counts: [usize; 3],
    tiles: [usize; 3],
) -> ValueId {
    let [nm, nn, nk] = counts;
    let [tm, tn, tk] = tiles;
    let nest_root = bb.ops.len();
    let result = bb.for_loop((0, nm as i64, 1), &[acc0], |bb, it, a0| {
        bb.for_loop((0, nn as i64, 1), &[a0[0]], |bb, jt, a1| {
            bb.for_loop((0, nk as i64, 1), &[a1[0]], |bb, kt, a2| {
                let c_tm = bb.const_i32(tm as i64);
                let c_tn = bb.const_i32(tn as i64);
                let c_tk = bb.const_i32(tk as i64);
                let ri = bb.muli(it, c_tm);
                let rj = bb.muli(jt, c_tn);
                let rk = bb.muli(kt, c_tk);
                let a_t = bb.extract_slice(ap, &[ri, rk], &[tm, tk]);
                let b_t = bb.extract_slice(bp, &[rk, rj], &[tk, tn]);
                let p = bb.push1(
                    OpBuilder::new("cinm", "gemm").operands(&[a_t, b_t]),
                    TensorType::i32(vec![tm, tn]).into(),
                );
                let cur = bb.extract_slice(a2[0], &[ri, rj], &[tm, tn]);
                let merged = bb.push1(
                    OpBuilder::new("cinm", "mergePartial")
                        .operands(&[cur, p])
                        .attr_token("kind", "sum"),
                    TensorType::i32(vec![tm, tn]).into(),
                );
                vec![bb.insert_slice(a2[0], merged, &[ri, rj])]
            })
        })
    })[0];
    tag_nest(bb, nest_root, "gemm_box", 3);
    result
}

fn tile_gemv(bb: &mut BodyBuilder, op: &Op, spec: &TileSpec) -> Result<(usize, usize)> {
    if spec.pad_value != 0 {
        return Err(Error::invalid("gemv tiling requires the additive identity as padding"));
    }
    let a = op.operands[0];
    let x = op.operands[1];
    let (m, k) = match bb.tensor_ty(a).shape.as_slice() {
        [m, k] => (*m, *k),
        _ => unreachable!(),
    };
    match spec.shape {
        TileShape::Box => {
            let [tm, tk] = match spec.sizes.as_slice() {
                [tm, tk, ..] => [*tm, *tk],
                _ => return Err(Error::invalid("box gemv tiling needs sizes m x k")),
            };
            let (nm, nk) = (ceil_div(m, tm), ceil_div(k, tk));
            let ap = pad_to(bb, a, &[nm * tm, nk * tk], 0);
            let xp = pad_to(bb, x, &[nk * tk], 0);
            let acc0 = bb.splat(TensorType::i32(vec![nm * tm]), 0);
            let nest_root = bb.ops.len();
            let result = bb.for_loop((0, nm as i64, 1), &[acc0], |bb, it, a0| {
                bb.for_loop((0, nk as i64, 1), &[a0[0]], |bb, kt, a1| {
                    let c_tm = bb.const_i32(tm as i64);
                    let c_tk = bb.const_i32(tk as i64);
                    let ri = bb.muli(it, c_tm);
                    let rk = bb.muli(kt, c_tk);
                    let a_t = bb.extract_slice(ap, &[ri, rk], &[tm, tk]);
                    let x_t = bb.extract_slice(xp, &[rk], &[tk]);
                    let p = bb.push1(
                        OpBuilder::new("cinm", "gemv").operands(&[a_t, x_t]),
                        TensorType::i32(vec![tm]).into(),
                    );
                    let cur = bb.extract_slice(a1[0], &[ri], &[tm]);
                    let merged = bb.push1(
                        OpBuilder::new("cinm", "mergePartial")
                            .operands(&[cur, p])
                            .attr_token("kind", "sum"),
                        TensorType::i32(vec![tm]).into(),
                    );
                    vec![bb.insert_slice(a1[0], merged, &[ri])]
                })
            })[0];
            tag_nest(bb, nest_root, "gemv_box", 2);
            let cropped = crop_to(bb, result, &[m]);
            if cropped == result {
                bb.reshape(result, vec![m]);
            }
            Ok((nest_root, 2))
        }
        TileShape::Rect => {
            let tm = *spec.sizes.first().ok_or_else(|| Error::invalid("missing strip size"))?;
            let nm = ceil_div(m, tm);
            let ap = pad_to(bb, a, &[nm * tm, k], 0);
            let acc0 = bb.splat(TensorType::i32(vec![nm * tm]), 0);
            let nest_root = bb.ops.len();
            let result = bb.for_loop((0, nm as i64, 1), &[acc0], |bb, iv, args| {
                let c_tm = bb.const_i32(tm as i64);
                let ri = bb.muli(iv, c_tm);
                let zero = bb.const_i32(0);
                let a_t = bb.extract_slice(ap, &[ri, zero], &[tm, k]);
                let p = bb.push1(
                    OpBuilder::new("cinm", "gemv").operands(&[a_t, x]),
                    TensorType::i32(vec![tm]).into(),
                );
                vec![bb.insert_slice(args[0], p, &[ri])]
            })[0];
            tag_nest(bb, nest_root, "gemv_rect", 1);
            let cropped = crop_to(bb, result, &[m]);
            if cropped == result {
                bb.reshape(result, vec![m]);
            }
            Ok((nest_root, 1))
        }
    }
}

fn tile_elementwise(bb: &mut BodyBuilder, op: &Op, spec: &TileSpec) -> Result<(usize, usize)> {
    let t0 = *spec.sizes.first().ok_or_else(|| Error::invalid("missing tile size"))?;
    let a = op.operands[0];
    let b = op.operands[1];
    let ty = bb.tensor_ty(a);
    let n0 = ty.shape[0];
    let rest: Vec<usize> = ty.shape[1..].to_vec();
    let nt = ceil_div(n0, t0);
    let mut padded_shape = vec![nt * t0];
    padded_shape.extend_from_slice(&rest);
    let ap = pad_to(bb, a, &padded_shape, spec.pad_value);
    let bp = pad_to(bb, b, &padded_shape, spec.pad_value);
    let acc0 = bb.splat(TensorType::new(padded_shape.clone(), ty.elem), 0);
    let mnemonic = op.mnemonic.clone();
    let mut tile_shape = vec![t0];
    tile_shape.extend_from_slice(&rest);
    let nest_root = bb.ops.len();
    let result = bb.for_loop((0, nt as i64, 1), &[acc0], |bb, iv, args| {
        let c_t0 = bb.const_i32(t0 as i64);
        let ri = bb.muli(iv, c_t0);
        let mut offs = vec![ri];
        for _ in &rest {
            offs.push(bb.const_i32(0));
        }
        let a_t = bb.extract_slice(ap, &offs, &tile_shape);
        let b_t = bb.extract_slice(bp, &offs, &tile_shape);
        let p = bb.push1(
            OpBuilder::new("cinm", &mnemonic).operands(&[a_t, b_t]),
            TensorType::new(tile_shape.clone(), ty.elem).into(),
        );
        vec![bb.insert_slice(args[0], p, &offs)]
    })[0];
    tag_nest(bb, nest_root, "elementwise", 1);
    let cropped = crop_to(bb, result, &ty.shape);
    if cropped == result {
        bb.reshape(result, ty.shape.clone());
    }
    Ok((nest_root, 1))
}

fn tile_reduce(bb: &mut BodyBuilder, op: &Op, spec: &TileSpec) -> Result<(usize, usize)> {
    let t = *spec.sizes.first().ok_or_else(|| Error::invalid("missing tile size"))?;
    let kind = ReduceKind::parse(op.attr_token("op").unwrap())?;
    let src = op.operands[0];
    let total = bb.tensor_ty(src).element_count();
    let flat = bb.reshape(src, vec![total]);
    let nt = ceil_div(total.max(1), t);
    let fp = pad_to(bb, flat, &[nt * t], kind.identity());
    let partials0 = bb.splat(TensorType::i32(vec![nt]), kind.identity() as i64);
    let nest_root = bb.ops.len();
    let kind_tok = op.attr_token("op").unwrap().to_string();
    let partials = bb.for_loop((0, nt as i64, 1), &[partials0], |bb, iv, args| {
        let c_t = bb.const_i32(t as i64);
        let ri = bb.muli(iv, c_t);
        let chunk = bb.extract_slice(fp, &[ri], &[t]);
        let p = bb.push1(
            OpBuilder::new("cinm", "reduce").operands(&[chunk]).attr_token("op", &kind_tok),
            TensorType::i32(vec![]).into(),
        );
        let p1 = bb.reshape(p, vec![1]);
        vec![bb.insert_slice(args[0], p1, &[iv])]
    })[0];
    tag_nest(bb, nest_root, "reduce", 1);
    bb.push1(
        OpBuilder::new("cinm", "reduce")
            .operands(&[partials])
            .attr_token("op", &kind_tok)
            .attr_int("tiled", 1),
        TensorType::i32(vec![]).into(),
    );
    Ok((nest_root, 1))
}

fn tag_nest(bb: &mut BodyBuilder, nest_root: usize, kind: &str, depth: usize) {
    let root = &mut bb.ops[nest_root];
    root.attrs.insert("tile_nest".into(), Attr::Token(kind.to_string()));
    root.attrs.insert("tile_depth".into(), Attr::Int(depth as i64));
}

/// Collects the loop chain of a perfect nest rooted at `root` (indices into
/// nested regions are implicit; the chain is loops[0] = root, loops[i+1] =
/// first op of loops[i]'s region when it is the only non-yield op).
fn nest_depth(root: &Op) -> usize {
    root.attr_int("tile_depth").unwrap_or(1) as usize
}

/// Reorders the loops of a tile nest by `perm` (new level l runs what old
/// level perm[l] ran). The body is untouched: bounds and induction variables
/// travel together, and the accumulator threading is level-indexed, so the
/// permuted nest computes the same value because tile iterations commute
/// under sum/concat merges.
pub fn interchange(func: &mut Function, root_pos: usize, perm: &[usize]) -> Result<()> {
    let root = &func.body.ops[root_pos];
    if root.attr_token("tile_nest").is_none() {
        return Err(Error::invalid("interchange expects a tile nest root"));
    }
    let depth = nest_depth(root);
    check_permutation(&perm.iter().map(|p| *p as i64).collect::<Vec<_>>(), depth)
        .map_err(|_| Error::invalid(format!("invalid permutation for depth-{} nest", depth)))?;

    // Gather (bounds, iv id) per level.
    let mut bounds: Vec<(i64, i64, i64, ValueId)> = Vec::new();
    {
        let mut cur: &Op = &func.body.ops[root_pos];
        loop {
            bounds.push((
                cur.attr_int("lower").unwrap(),
                cur.attr_int("upper").unwrap(),
                cur.attr_int("step").unwrap(),
                cur.regions[0].args[0],
            ));
            if bounds.len() == depth {
                break;
            }
            cur = cur.regions[0]
                .ops
                .iter()
                .find(|o| o.is("core", "for"))
                .ok_or_else(|| Error::invalid("malformed tile nest"))?;
        }
    }
    let permuted: Vec<(i64, i64, i64, ValueId)> = perm.iter().map(|p| bounds[*p]).collect();
    fn apply(op: &mut Op, permuted: &[(i64, i64, i64, ValueId)]) {
        let Some(((lower, upper, step, iv), rest)) = permuted.split_first() else {
            return;
        };
        op.attrs.insert("lower".into(), Attr::Int(*lower));
        op.attrs.insert("upper".into(), Attr::Int(*upper));
        op.attrs.insert("step".into(), Attr::Int(*step));
        op.regions[0].args[0] = *iv;
        if !rest.is_empty() {
            let inner = op.regions[0]
                .ops
                .iter_mut()
                .find(|o| o.is("core", "for"))
                .expect("nest depth checked");
            apply(inner, rest);
        }
    }
    apply(&mut func.body.ops[root_pos], &permuted);
    Ok(())
}

/// Unrolls the loop at `loop_index` within the nest rooted at `root_pos` by
/// `factor`. The factor must divide the trip count; a full unroll eliminates
/// the loop into straight-line bodies.
pub fn unroll(func: &mut Function, root_pos: usize, loop_index: usize, factor: usize) -> Result<()> {
    // Path: position of each enclosing loop within its region, ending at the
    // target loop. Inner loops of our canonical nests are located by search.
    let mut path = vec![root_pos];
    {
        let mut cur: &Op = &func.body.ops[root_pos];
        for _ in 0..loop_index {
            let pos = cur.regions[0]
                .ops
                .iter()
                .position(|o| o.is("core", "for"))
                .ok_or_else(|| Error::invalid("nest shallower than the requested loop"))?;
            path.push(pos);
            cur = &cur.regions[0].ops[pos];
        }
    }
    unroll_at(func, &path, factor)
}

/// Region op list holding the op addressed by `path` (all but the last
/// element select an enclosing loop).
fn get_region_ops<'a>(func: &'a mut Function, path: &[usize]) -> &'a mut Vec<Op> {
    let mut ops: &mut Vec<Op> = &mut func.body.ops;
    for (i, idx) in path.iter().enumerate() {
        if i + 1 == path.len() {
            return ops;
        }
        ops = &mut ops[*idx].regions[0].ops;
    }
    ops
}

/// Unrolls the loop addressed by an explicit region path.
pub fn unroll_at(func: &mut Function, path: &[usize], factor: usize) -> Result<()> {
    if factor == 0 {
        return Err(Error::invalid("unroll factor must be positive"));
    }
    if factor == 1 {
        return Ok(());
    }
    let container = get_region_ops(func, path);
    let loop_pos = *path.last().unwrap();
    let target = container[loop_pos].clone();
    if !target.is("core", "for") {
        return Err(Error::invalid("unroll target is not a loop"));
    }
    let lower = target.attr_int("lower").unwrap();
    let upper = target.attr_int("upper").unwrap();
    let step = target.attr_int("step").unwrap();
    let trips = ((upper - lower) / step) as usize;
    if trips == 0 || trips % factor != 0 {
        return Err(Error::invalid(format!(
            "unroll factor {} does not divide trip count {}",
            factor, trips
        )));
    }

    let region = &target.regions[0];
    let iv = region.args[0];
    let carried: Vec<ValueId> = region.args[1..].to_vec();
    let body: Vec<Op> = region.ops[..region.ops.len().saturating_sub(1)].to_vec();
    let yields: Vec<ValueId> = match region.ops.last() {
        Some(y) if y.is("core", "yield") => y.operands.clone(),
        _ => vec![],
    };

    // Build the replicated body: replica j remaps iv -> iv + j*step and
    // threads the carried values through the previous replica's yields.
    let mut build_replicas = |func: &mut Function,
                              iv_value: ValueId,
                              init_carried: &[ValueId]|
     -> (Vec<Op>, Vec<ValueId>) {
        let mut ops: Vec<Op> = Vec::new();
        let mut cur_carried: Vec<ValueId> = init_carried.to_vec();
        let mut final_yields = yields.clone();
        for j in 0..factor {
            let mut map: std::collections::HashMap<ValueId, ValueId> = Default::default();
            // iv_j = iv + j*step
            let iv_j = if j == 0 {
                iv_value
            } else {
                let mut bb = BodyBuilder::new(func);
                let c = bb.const_i32(j as i64 * step);
                let v = bb.addi(iv_value, c);
                ops.extend(bb.ops);
                v
            };
            map.insert(iv, iv_j);
            for (arg, val) in carried.iter().zip(&cur_carried) {
                map.insert(*arg, *val);
            }
            for op in &body {
                ops.push(crate::ir::clone_op_remapped(func, op, &mut map));
            }
            cur_carried = yields.iter().map(|y| *map.get(y).unwrap_or(y)).collect();
            final_yields = cur_carried.clone();
        }
        (ops, final_yields)
    };

    if factor == trips {
        // Full unroll: splice straight-line bodies in place of the loop.
        let mut bb = BodyBuilder::new(func);
        let iv0 = bb.const_i32(lower);
        let head = bb.ops;
        let (mut ops, final_yields) = build_replicas(func, iv0, &target.operands);
        let mut all = head;
        all.append(&mut ops);
        // Re-home the loop results onto their final carried values via
        // identity reshapes.
        let mut bb = BodyBuilder::new(func);
        for (res, (val, ty)) in
            target.results.iter().zip(final_yields.iter().zip(&target.result_types))
        {
            let shape = ty.tensor().unwrap().shape.clone();
            bb.reshape(*val, shape);
            let last = bb.ops.last_mut().unwrap();
            last.results[0] = *res;
        }
        all.extend(bb.ops);
        let container = get_region_ops(func, path);
        container.splice(loop_pos..=loop_pos, all);
        return Ok(());
    }

    // Partial unroll: same loop, bigger step, replicated body.
    let new_iv = func.new_value(crate::ir::types::scalar_i32());
    let new_args: Vec<ValueId> = carried
        .iter()
        .map(|c| {
            let ty = func.value_type(*c).clone();
            func.new_value(ty)
        })
        .collect();
    let (mut ops, final_yields) = build_replicas(func, new_iv, &new_args);
    ops.push(OpBuilder::new("core", "yield").operands(&final_yields).no_results());
    let mut arg_types = vec![crate::ir::types::scalar_i32()];
    for c in &carried {
        arg_types.push(func.value_type(*c).clone());
    }
    let mut args = vec![new_iv];
    args.extend(new_args);
    let new_region = crate::ir::Region { args, arg_types, ops };
    let container = get_region_ops(func, path);
    let target = &mut container[loop_pos];
    target.attrs.insert("step".into(), Attr::Int(step * factor as i64));
    target.regions[0] = new_region;
    Ok(())
}

// ---- bufferization -------------------------------------------------------

/// Gives every top-level cinm tensor result an explicit host allocation and
/// rewrites the ops into destination-passing form; one allocation per SSA
/// value, no reuse analysis.
pub fn bufferize(module: &mut Module) -> Result<()> {
    for func in &mut module.functions {
        let mut rewrites: Vec<(usize, Vec<ValueId>)> = Vec::new();
        for (pos, op) in func.body.ops.iter().enumerate() {
            if op.dialect == "cinm" && !op.results.is_empty() {
                rewrites.push((pos, op.results.clone()));
            }
        }
        // Rewrite back to front so positions stay valid while splicing.
        for (pos, results) in rewrites.into_iter().rev() {
            let mut allocs = Vec::new();
            let mut alloc_ids = Vec::new();
            for r in &results {
                let ty = func.value_type(*r).clone();
                let (op, ids) = OpBuilder::new("core", "alloc").results(func, &[ty]);
                alloc_ids.push(ids[0]);
                allocs.push(op);
            }
            {
                let op = &mut func.body.ops[pos];
                op.operands.extend_from_slice(&alloc_ids);
                op.attrs.insert("dst".into(), Attr::Int(results.len() as i64));
                op.results.clear();
                op.result_types.clear();
            }
            let n = allocs.len();
            func.body.ops.splice(pos..pos, allocs);
            // Redirect every later use of the old results to the allocations.
            let start = pos + n + 1;
            let map: std::collections::HashMap<ValueId, ValueId> =
                results.iter().copied().zip(alloc_ids.iter().copied()).collect();
            for op in &mut func.body.ops[start..] {
                rewrite_uses(op, &map);
            }
        }
    }
    Ok(())
}

fn rewrite_uses(op: &mut Op, map: &std::collections::HashMap<ValueId, ValueId>) {
    for o in &mut op.operands {
        if let Some(n) = map.get(o) {
            *o = *n;
        }
    }
    for region in &mut op.regions {
        for inner in &mut region.ops {
            rewrite_uses(inner, map);
        }
    }
}

// ---- pass wrappers ---------------------------------------------------------

pub fn tile_pass(module: &mut Module, spec: &PassSpec) -> Result<()> {
    let shape = match spec.opt("shape").unwrap_or("box") {
        "box" => TileShape::Box,
        "rect" => TileShape::Rect,
        other => return Err(Error::invalid(format!("unknown tile shape '{}'", other))),
    };
    let sizes = spec.opt_dims("sizes", &[2, 2, 2])?;
    let tile_spec = TileSpec::new(shape, sizes);
    for func in &mut module.functions {
        loop {
            let pos = func.body.ops.iter().position(|op| is_tileable(op));
            match pos {
                Some(pos) => {
                    tile_op(func, pos, &tile_spec)?;
                }
                None => break,
            }
        }
    }
    Ok(())
}

pub fn interchange_pass(module: &mut Module, spec: &PassSpec) -> Result<()> {
    let perm = spec.opt_dims("perm", &[])?;
    if perm.is_empty() {
        return Err(Error::invalid("interchange needs perm=..."));
    }
    for func in &mut module.functions {
        let roots: Vec<usize> = func
            .body
            .ops
            .iter()
            .enumerate()
            .filter(|(_, op)| {
                op.attr_token("tile_nest").is_some() && nest_depth(op) == perm.len()
            })
            .map(|(i, _)| i)
            .collect();
        for root in roots {
            interchange(func, root, &perm)?;
        }
    }
    Ok(())
}

pub fn unroll_pass(module: &mut Module, spec: &PassSpec) -> Result<()> {
    let loop_index = spec.opt_usize("loop", 0)?;
    let factor = spec.opt_usize("factor", 1)?;
    for func in &mut module.functions {
        let roots: Vec<usize> = func
            .body
            .ops
            .iter()
            .enumerate()
            .filter(|(_, op)| op.attr_token("tile_nest").is_some())
            .map(|(i, _)| i)
            .collect();
        // Back to front: a full unroll splices ops into the body.
        for root in roots.into_iter().rev() {
            unroll(func, root, loop_index, factor)?;
        }
    }
    Ok(())
}

pub fn bufferize_pass(module: &mut Module, _spec: &PassSpec) -> Result<()> {
    bufferize(module)
}
