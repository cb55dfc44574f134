//! The `cinm` dialect: the device-agnostic compute operator set with
//! per-paradigm support flags, plus the frontend staging ops (`conv2d`,
//! `contract`) that the rewrites turn into GEMM.

pub mod rewrites;

use crate::error::{Error, Result};
use crate::ir::registry::{OpSpec, Registry, VerifyCtx};
use crate::ir::types::{ElemKind, TensorType};
use crate::ir::Op;
use crate::coreops::{expect_operands, expect_results, operand_tensor, result_tensor};
use crate::semantics::{LogicKind, MergeKind, Metric, ReduceKind};

/// Every operation of the dialect table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum CinmOpKind {
    Add,
    Sub,
    Gemm,
    Gemv,
    Min,
    Max,
    LogicOp,
    Transpose,
    Histogram,
    Majority,
    TopK,
    SimSearch,
    MergePartial,
    Popcount,
    Reduce,
    Scan,
}

pub const ALL_KINDS: [CinmOpKind; 16] = [
    CinmOpKind::Add,
    CinmOpKind::Sub,
    CinmOpKind::Gemm,
    CinmOpKind::Gemv,
    CinmOpKind::Min,
    CinmOpKind::Max,
    CinmOpKind::LogicOp,
    CinmOpKind::Transpose,
    CinmOpKind::Histogram,
    CinmOpKind::Majority,
    CinmOpKind::TopK,
    CinmOpKind::SimSearch,
    CinmOpKind::MergePartial,
    CinmOpKind::Popcount,
    CinmOpKind::Reduce,
    CinmOpKind::Scan,
];

impl CinmOpKind {
    pub fn mnemonic(self) -> &'static str {
        match self {
            CinmOpKind::Add => "add",
            CinmOpKind::Sub => "sub",
            CinmOpKind::Gemm => "gemm",
            CinmOpKind::Gemv => "gemv",
            CinmOpKind::Min => "min",
            CinmOpKind::Max => "max",
            CinmOpKind::LogicOp => "logicop",
            CinmOpKind::Transpose => "transpose",
            CinmOpKind::Histogram => "histogram",
            CinmOpKind::Majority => "majority",
            CinmOpKind::TopK => "topk",
            CinmOpKind::SimSearch => "simSearch",
            CinmOpKind::MergePartial => "mergePartial",
            CinmOpKind::Popcount => "popcount",
            CinmOpKind::Reduce => "reduce",
            CinmOpKind::Scan => "scan",
        }
    }

    pub fn from_mnemonic(m: &str) -> Option<CinmOpKind> {
        ALL_KINDS.iter().copied().find(|k| k.mnemonic() == m)
    }
}

/// Per-paradigm capability flags, fixed constants from the operator table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Support {
    pub cim: bool,
    pub cnm: bool,
}

pub fn support(kind: CinmOpKind) -> Support {
    use CinmOpKind::*;
    match kind {
        Add | Sub | Gemm | Gemv | Min | Max | LogicOp | SimSearch | MergePartial => {
            Support { cim: true, cnm: true }
        }
        Transpose | Histogram | Majority | TopK | Reduce | Scan => {
            Support { cim: false, cnm: true }
        }
        Popcount => Support { cim: true, cnm: false },
    }
}

pub fn register(reg: &mut Registry) {
    let ops: &[(&'static str, fn(&VerifyCtx, &Op) -> Result<()>)] = &[
        ("add", verify_elementwise),
        ("sub", verify_elementwise),
        ("gemm", verify_gemm),
        ("gemv", verify_gemv),
        ("min", verify_full_reduce),
        ("max", verify_full_reduce),
        ("logicop", verify_logicop),
        ("transpose", verify_transpose),
        ("histogram", verify_histogram),
        ("majority", verify_majority),
        ("topk", verify_topk),
        ("simSearch", verify_sim_search),
        ("mergePartial", verify_merge_partial),
        ("popcount", verify_popcount),
        ("reduce", verify_reduce),
        ("scan", verify_scan),
        ("conv2d", verify_conv2d),
        ("contract", verify_contract),
    ];
    for (mnemonic, verify) in ops {
        reg.register("cinm", mnemonic, OpSpec { isolated: false, verify: *verify });
    }
}

/// Shape verification shared with the device-library call form
/// (`upmem.kernel_call {callee = ...}`), which mirrors the compute ops.
pub fn verify_compute_shape(mnemonic: &str, ctx: &VerifyCtx, op: &Op) -> Result<()> {
    match mnemonic {
        "add" | "sub" => verify_elementwise(ctx, op),
        "gemm" => verify_gemm(ctx, op),
        "gemv" => verify_gemv(ctx, op),
        "min" | "max" => verify_full_reduce(ctx, op),
        "logicop" => verify_logicop(ctx, op),
        "transpose" => verify_transpose(ctx, op),
        "histogram" => verify_histogram(ctx, op),
        "majority" => verify_majority(ctx, op),
        "topk" => verify_topk(ctx, op),
        "simSearch" => verify_sim_search(ctx, op),
        "mergePartial" => verify_merge_partial(ctx, op),
        "popcount" => verify_popcount(ctx, op),
        "reduce" => verify_reduce(ctx, op),
        "scan" => verify_scan(ctx, op),
        other => Err(Error::verify(format!("unknown compute callee '{}'", other))),
    }
}

/// Number of value operands before an optional bufferization destination.
fn value_operands(op: &Op) -> usize {
    if op.attrs.contains_key("dst") {
        op.operands.len().saturating_sub(1)
    } else {
        op.operands.len()
    }
}

fn expect_value_operands(op: &Op, n: usize) -> Result<()> {
    if value_operands(op) != n {
        return Err(Error::verify(format!(
            "expected {} operands, found {}",
            n,
            value_operands(op)
        )));
    }
    Ok(())
}

/// In destination-passing (bufferized) form ops carry no SSA results; the
/// result type is recovered from the trailing destination operand.
fn check_result(ctx: &VerifyCtx, op: &Op, expected: &[TensorType]) -> Result<()> {
    if op.attrs.contains_key("dst") {
        if expected.len() != 1 {
            return Err(Error::verify("dst form requires a single result"));
        }
        expect_results(op, 0)?;
        let dst = operand_tensor(ctx, op, op.operands.len() - 1)?;
        if *dst != expected[0] {
            return Err(Error::verify("destination type mismatch"));
        }
        return Ok(());
    }
    expect_results(op, expected.len())?;
    for (i, e) in expected.iter().enumerate() {
        if result_tensor(op, i)? != e {
            return Err(Error::verify(format!(
                "result {} must have type {}, found {}",
                i,
                e,
                op.result_types[i]
            )));
        }
    }
    Ok(())
}

fn verify_elementwise(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_value_operands(op, 2)?;
    let a = operand_tensor(ctx, op, 0)?.clone();
    let b = operand_tensor(ctx, op, 1)?;
    if a != *b {
        return Err(Error::verify(format!("operand shapes differ: {} vs {}", a, b)));
    }
    if a.elem != ElemKind::I32 {
        return Err(Error::verify("add/sub operate on i32 tensors"));
    }
    check_result(ctx, op, &[a])
}

fn verify_gemm(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_value_operands(op, 2)?;
    let a = operand_tensor(ctx, op, 0)?.clone();
    let b = operand_tensor(ctx, op, 1)?.clone();
    match (a.shape.as_slice(), b.shape.as_slice()) {
        ([m, k1], [k2, n]) if k1 == k2 => {
            check_result(ctx, op, &[TensorType::i32(vec![*m, *n])])
        }
        _ => Err(Error::verify(format!("gemm shapes incompatible: {} x {}", a, b))),
    }
}

fn verify_gemv(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_value_operands(op, 2)?;
    let a = operand_tensor(ctx, op, 0)?.clone();
    let x = operand_tensor(ctx, op, 1)?.clone();
    match (a.shape.as_slice(), x.shape.as_slice()) {
        ([m, k1], [k2]) if k1 == k2 => check_result(ctx, op, &[TensorType::i32(vec![*m])]),
        _ => Err(Error::verify(format!("gemv shapes incompatible: {} x {}", a, x))),
    }
}

fn verify_full_reduce(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_value_operands(op, 1)?;
    let t = operand_tensor(ctx, op, 0)?;
    if t.elem != ElemKind::I32 {
        return Err(Error::verify("min/max operate on i32 tensors"));
    }
    check_result(ctx, op, &[TensorType::scalar(ElemKind::I32)])
}

fn verify_logicop(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    let kind = LogicKind::parse(
        op.attr_token("op").ok_or_else(|| Error::verify("missing 'op' attribute"))?,
    )?;
    let n = if kind.is_unary() { 1 } else { 2 };
    expect_value_operands(op, n)?;
    let a = operand_tensor(ctx, op, 0)?.clone();
    if a.elem != ElemKind::I1 {
        return Err(Error::verify("logicop operates on i1 tensors"));
    }
    if n == 2 && *operand_tensor(ctx, op, 1)? != a {
        return Err(Error::verify("logicop operand shapes differ"));
    }
    check_result(ctx, op, &[a])
}

fn verify_transpose(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_value_operands(op, 1)?;
    let t = operand_tensor(ctx, op, 0)?.clone();
    match t.shape.as_slice() {
        [m, n] => check_result(ctx, op, &[TensorType::new(vec![*n, *m], t.elem)]),
        _ => Err(Error::verify("transpose expects a rank-2 tensor")),
    }
}

fn verify_histogram(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_value_operands(op, 1)?;
    let t = operand_tensor(ctx, op, 0)?;
    if t.elem != ElemKind::I32 {
        return Err(Error::verify("histogram operates on i32 tensors"));
    }
    let bins = op.attr_int("bins").ok_or_else(|| Error::verify("missing 'bins'"))?;
    if bins < 1 {
        return Err(Error::verify("histogram needs at least one bin"));
    }
    check_result(ctx, op, &[TensorType::i32(vec![bins as usize])])
}

fn verify_majority(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_value_operands(op, 1)?;
    let t = operand_tensor(ctx, op, 0)?;
    if t.rank() != 1 || t.elem != ElemKind::I1 {
        return Err(Error::verify("majority expects a rank-1 i1 tensor"));
    }
    check_result(ctx, op, &[TensorType::scalar(ElemKind::I1)])
}

fn verify_topk(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_value_operands(op, 1)?;
    let t = operand_tensor(ctx, op, 0)?;
    let k = op.attr_int("k").ok_or_else(|| Error::verify("missing 'k'"))? as usize;
    match t.shape.as_slice() {
        [n] if k <= *n && t.elem == ElemKind::I32 => check_result(
            ctx,
            op,
            &[TensorType::i32(vec![k]), TensorType::i32(vec![k])],
        ),
        [n] if k > *n => Err(Error::verify(format!("topk k={} exceeds length {}", k, n))),
        _ => Err(Error::verify("topk expects a rank-1 i32 tensor")),
    }
}

fn verify_sim_search(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_value_operands(op, 2)?;
    Metric::parse(op.attr_token("metric").ok_or_else(|| Error::verify("missing 'metric'"))?)?;
    let count = op.attr_int("count").ok_or_else(|| Error::verify("missing 'count'"))? as usize;
    let q = operand_tensor(ctx, op, 0)?.clone();
    let c = operand_tensor(ctx, op, 1)?.clone();
    match (q.shape.as_slice(), c.shape.as_slice()) {
        ([k1], [n, k2]) if k1 == k2 && count <= *n => check_result(
            ctx,
            op,
            &[TensorType::i32(vec![count]), TensorType::i32(vec![count])],
        ),
        ([_], [n, _]) if count > *n => {
            Err(Error::verify(format!("simSearch count={} exceeds corpus rows {}", count, n)))
        }
        _ => Err(Error::verify("simSearch expects query k and corpus n x k")),
    }
}

fn verify_merge_partial(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_value_operands(op, 2)?;
    let kind = MergeKind::parse(
        op.attr_token("kind").ok_or_else(|| Error::verify("missing 'kind'"))?,
    )?;
    let acc = operand_tensor(ctx, op, 0)?.clone();
    let part = operand_tensor(ctx, op, 1)?.clone();
    match kind {
        MergeKind::Sum => {
            if acc != part {
                return Err(Error::verify("mergePartial sum operand shapes differ"));
            }
            check_result(ctx, op, &[acc])
        }
        MergeKind::Concat => {
            let axis = op.attr_int("axis").unwrap_or(0) as usize;
            if acc.rank() != part.rank() || axis >= acc.rank() || acc.elem != part.elem {
                return Err(Error::verify("mergePartial concat rank/axis mismatch"));
            }
            let mut shape = acc.shape.clone();
            for (d, (a, p)) in acc.shape.iter().zip(&part.shape).enumerate() {
                if d != axis && a != p {
                    return Err(Error::verify("mergePartial concat off-axis extents differ"));
                }
            }
            shape[axis] += part.shape[axis];
            check_result(ctx, op, &[TensorType::new(shape, acc.elem)])
        }
    }
}

fn verify_popcount(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_value_operands(op, 1)?;
    let t = operand_tensor(ctx, op, 0)?;
    if t.elem != ElemKind::I1 {
        return Err(Error::verify("popcount expects an i1 tensor"));
    }
    check_result(ctx, op, &[TensorType::scalar(ElemKind::I32)])
}

fn verify_reduce(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_value_operands(op, 1)?;
    ReduceKind::parse(op.attr_token("op").ok_or_else(|| Error::verify("missing 'op'"))?)?;
    let t = operand_tensor(ctx, op, 0)?;
    if t.elem != ElemKind::I32 {
        return Err(Error::verify("reduce operates on i32 tensors"));
    }
    if t.element_count() == 0 {
        return Err(Error::verify("reduce of an empty tensor"));
    }
    check_result(ctx, op, &[TensorType::scalar(ElemKind::I32)])
}

fn verify_scan(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_value_operands(op, 1)?;
    ReduceKind::parse(op.attr_token("op").ok_or_else(|| Error::verify("missing 'op'"))?)?;
    let t = operand_tensor(ctx, op, 0)?.clone();
    if t.rank() != 1 || t.elem != ElemKind::I32 {
        return Err(Error::verify("scan expects a rank-1 i32 tensor"));
    }
    check_result(ctx, op, &[t])
}

fn verify_conv2d(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_value_operands(op, 2)?;
    let input = operand_tensor(ctx, op, 0)?.clone();
    let filter = operand_tensor(ctx, op, 1)?.clone();
    // Stride and padding beyond (1, none) are out of scope for the rewrite.
    if op.attr_int("stride").unwrap_or(1) != 1 || op.attr_int("pad").unwrap_or(0) != 0 {
        return Err(Error::verify("unsupported conv form"));
    }
    match (input.shape.as_slice(), filter.shape.as_slice()) {
        ([n, h, w, c], [kh, kw, fc, f]) if c == fc && kh <= h && kw <= w => check_result(
            ctx,
            op,
            &[TensorType::i32(vec![*n, h - kh + 1, w - kw + 1, *f])],
        ),
        _ => Err(Error::verify("conv2d expects NHWC input and HWCF filter")),
    }
}

fn verify_contract(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_value_operands(op, 2)?;
    let spec = op.attr_str("spec").ok_or_else(|| Error::verify("missing 'spec'"))?;
    let (ins, out_spec) = crate::semantics::parse_einsum(spec)?;
    if ins.len() != 2 {
        return Err(Error::verify("contract expects exactly two inputs"));
    }
    let a = operand_tensor(ctx, op, 0)?.clone();
    let b = operand_tensor(ctx, op, 1)?.clone();
    if ins[0].len() != a.rank() || ins[1].len() != b.rank() {
        return Err(Error::verify("contract index string rank mismatch"));
    }
    let mut extents = std::collections::BTreeMap::new();
    for (c, d) in ins[0].chars().zip(&a.shape).chain(ins[1].chars().zip(&b.shape)) {
        if *extents.entry(c).or_insert(*d) != *d {
            return Err(Error::verify(format!("contract index '{}' extent mismatch", c)));
        }
    }
    let mut shape = Vec::new();
    for c in out_spec.chars() {
        let d = extents
            .get(&c)
            .ok_or_else(|| Error::verify(format!("output index '{}' not found in inputs", c)))?;
        shape.push(*d);
    }
    check_result(ctx, op, &[TensorType::i32(shape)])
}
