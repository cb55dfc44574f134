//! The `core` dialect: constants, slicing, reshapes, index arithmetic,
//! structured loops, and the small data-movement primitives the lowerings
//! need for host-side glue. Also home of `BodyBuilder`, the helper the
//! transformation passes use to assemble IR.

use crate::error::{Error, Result};
use crate::ir::registry::{OpSpec, Registry, VerifyCtx};
use crate::ir::types::{scalar_i32, ElemKind, TensorType, Type};
use crate::ir::{Attr, Function, Op, OpBuilder, Region, ValueId};

pub fn register(reg: &mut Registry) {
    let ops: &[(&'static str, VerifyFn)] = &[
        ("constant", verify_constant),
        ("splat", verify_splat),
        ("extract_slice", verify_extract_slice),
        ("insert_slice", verify_insert_slice),
        ("reshape", verify_reshape),
        ("permute", verify_permute),
        ("gather", verify_gather),
        ("scatter", verify_scatter),
        ("cast", verify_cast),
        ("addi", verify_arith),
        ("subi", verify_arith),
        ("muli", verify_arith),
        ("cmpi", verify_cmpi),
        ("for", verify_for),
        ("yield", verify_trivial),
        ("alloc", verify_alloc),
        ("return", verify_trivial),
    ];
    for (mnemonic, verify) in ops {
        reg.register("core", mnemonic, OpSpec { isolated: false, verify: *verify });
    }
}

type VerifyFn = fn(&VerifyCtx, &Op) -> Result<()>;

// ---- shared helpers for per-op verifiers -------------------------------

pub fn expect_operands(op: &Op, n: usize) -> Result<()> {
    if op.operands.len() != n {
        return Err(Error::verify(format!("expected {} operands, found {}", n, op.operands.len())));
    }
    Ok(())
}

pub fn expect_results(op: &Op, n: usize) -> Result<()> {
    if op.results.len() != n {
        return Err(Error::verify(format!("expected {} results, found {}", n, op.results.len())));
    }
    Ok(())
}

pub fn operand_tensor<'c>(ctx: &'c VerifyCtx, op: &Op, i: usize) -> Result<&'c TensorType> {
    ctx.ty(*op
        .operands
        .get(i)
        .ok_or_else(|| Error::verify(format!("missing operand {}", i)))?)
    .tensor()
    .ok_or_else(|| Error::verify(format!("operand {} must be a tensor", i)))
}

pub fn result_tensor<'o>(op: &'o Op, i: usize) -> Result<&'o TensorType> {
    op.result_types
        .get(i)
        .ok_or_else(|| Error::verify(format!("missing result {}", i)))?
        .tensor()
        .ok_or_else(|| Error::verify(format!("result {} must be a tensor", i)))
}

fn verify_trivial(_ctx: &VerifyCtx, _op: &Op) -> Result<()> {
    Ok(())
}

fn verify_constant(_ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 0)?;
    expect_results(op, 1)?;
    let ty = result_tensor(op, 0)?;
    let n = ty.element_count();
    match op.attrs.get("value") {
        Some(Attr::Int(_)) if n == 1 => Ok(()),
        Some(Attr::IntList(vs)) if vs.len() == n => {
            if ty.elem == ElemKind::I1 && vs.iter().any(|v| *v != 0 && *v != 1) {
                return Err(Error::verify("i1 constant holds non-boolean value"));
            }
            Ok(())
        }
        Some(_) => Err(Error::verify("constant value does not match result element count")),
        None => Err(Error::verify("constant needs a 'value' attribute")),
    }
}

fn verify_splat(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_results(op, 1)?;
    result_tensor(op, 0)?;
    match (op.operands.len(), op.attrs.get("value")) {
        (0, Some(Attr::Int(_))) => Ok(()),
        (1, None) => {
            let t = operand_tensor(ctx, op, 0)?;
            if t.rank() != 0 {
                return Err(Error::verify("splat operand must be a scalar"));
            }
            Ok(())
        }
        _ => Err(Error::verify("splat takes either a scalar operand or a 'value' attribute")),
    }
}

fn verify_extract_slice(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    let src = operand_tensor(ctx, op, 0)?;
    let rank = src.rank();
    expect_operands(op, 1 + rank)?;
    for i in 0..rank {
        if !ctx.ty(op.operands[1 + i]).is_scalar_of(ElemKind::I32) {
            return Err(Error::verify("slice offsets must be i32 scalars"));
        }
    }
    let sizes = op.attr_list("sizes").ok_or_else(|| Error::verify("missing 'sizes'"))?;
    let out = result_tensor(op, 0)?;
    if sizes.len() != rank || out.shape.iter().zip(sizes).any(|(d, s)| *d as i64 != *s) {
        return Err(Error::verify("result shape does not match 'sizes'"));
    }
    if out.elem != src.elem {
        return Err(Error::verify("slice element kind mismatch"));
    }
    Ok(())
}

fn verify_insert_slice(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    let dst = operand_tensor(ctx, op, 0)?.clone();
    let val = operand_tensor(ctx, op, 1)?;
    if val.rank() != dst.rank() || val.elem != dst.elem {
        return Err(Error::verify("insert_slice value rank/kind mismatch"));
    }
    expect_operands(op, 2 + dst.rank())?;
    let out = result_tensor(op, 0)?;
    if *out != dst {
        return Err(Error::verify("insert_slice result must match destination type"));
    }
    Ok(())
}

fn verify_reshape(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 1)?;
    let src = operand_tensor(ctx, op, 0)?;
    let out = result_tensor(op, 0)?;
    if src.element_count() != out.element_count() || src.elem != out.elem {
        return Err(Error::verify("reshape must preserve element count and kind"));
    }
    Ok(())
}

fn verify_permute(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 1)?;
    let src = operand_tensor(ctx, op, 0)?;
    let perm = op.attr_list("perm").ok_or_else(|| Error::verify("missing 'perm'"))?;
    check_permutation(perm, src.rank())?;
    let out = result_tensor(op, 0)?;
    let expect: Vec<usize> = perm.iter().map(|p| src.shape[*p as usize]).collect();
    if out.shape != expect || out.elem != src.elem {
        return Err(Error::verify("permute result shape mismatch"));
    }
    Ok(())
}

pub fn check_permutation(perm: &[i64], rank: usize) -> Result<()> {
    if perm.len() != rank {
        return Err(Error::verify(format!(
            "invalid permutation length {} for rank {}",
            perm.len(),
            rank
        )));
    }
    let mut seen = vec![false; rank];
    for p in perm {
        let p = *p;
        if p < 0 || p as usize >= rank || seen[p as usize] {
            return Err(Error::verify("invalid permutation"));
        }
        seen[p as usize] = true;
    }
    Ok(())
}

fn verify_gather(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 2)?;
    let src = operand_tensor(ctx, op, 0)?;
    let idx = operand_tensor(ctx, op, 1)?;
    let out = result_tensor(op, 0)?;
    if src.rank() != 1 || idx.rank() != 1 || idx.elem != ElemKind::I32 {
        return Err(Error::verify("gather expects rank-1 source and i32 indices"));
    }
    if out.shape != idx.shape || out.elem != src.elem {
        return Err(Error::verify("gather result must mirror the index shape"));
    }
    Ok(())
}

fn verify_scatter(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 3)?;
    let dst = operand_tensor(ctx, op, 0)?.clone();
    let idx = operand_tensor(ctx, op, 1)?;
    let val = operand_tensor(ctx, op, 2)?;
    if dst.rank() != 1 || idx.rank() != 1 || val.rank() != 1 {
        return Err(Error::verify("scatter expects rank-1 operands"));
    }
    if idx.shape != val.shape || idx.elem != ElemKind::I32 || val.elem != dst.elem {
        return Err(Error::verify("scatter index/value mismatch"));
    }
    let out = result_tensor(op, 0)?;
    if *out != dst {
        return Err(Error::verify("scatter result must match destination type"));
    }
    Ok(())
}

fn verify_cast(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 1)?;
    let src = operand_tensor(ctx, op, 0)?;
    let out = result_tensor(op, 0)?;
    if src.shape != out.shape {
        return Err(Error::verify("cast must preserve shape"));
    }
    Ok(())
}

fn verify_arith(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 2)?;
    for i in 0..2 {
        if !ctx.ty(op.operands[i]).is_scalar_of(ElemKind::I32) {
            return Err(Error::verify("integer arithmetic expects i32 scalars"));
        }
    }
    expect_results(op, 1)?;
    if !op.result_types[0].is_scalar_of(ElemKind::I32) {
        return Err(Error::verify("integer arithmetic produces an i32 scalar"));
    }
    Ok(())
}

fn verify_cmpi(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 2)?;
    for i in 0..2 {
        if !ctx.ty(op.operands[i]).is_scalar_of(ElemKind::I32) {
            return Err(Error::verify("cmpi expects i32 scalars"));
        }
    }
    let pred = op.attr_token("pred").ok_or_else(|| Error::verify("missing 'pred'"))?;
    if !matches!(pred, "eq" | "ne" | "lt" | "le" | "gt" | "ge") {
        return Err(Error::verify(format!("unknown cmpi predicate '{}'", pred)));
    }
    if !op.result_types.first().map(|t| t.is_scalar_of(ElemKind::I1)).unwrap_or(false) {
        return Err(Error::verify("cmpi produces an i1 scalar"));
    }
    Ok(())
}

fn verify_for(ctx: &VerifyCtx, op: &Op) -> Result<()> {
    let lower = op.attr_int("lower").ok_or_else(|| Error::verify("missing 'lower'"))?;
    let upper = op.attr_int("upper").ok_or_else(|| Error::verify("missing 'upper'"))?;
    let step = op.attr_int("step").ok_or_else(|| Error::verify("missing 'step'"))?;
    if step < 1 {
        return Err(Error::verify("loop step must be positive"));
    }
    if lower > upper {
        return Err(Error::verify("loop lower bound exceeds upper bound"));
    }
    if op.regions.len() != 1 {
        return Err(Error::verify("loop takes exactly one region"));
    }
    let region = &op.regions[0];
    if region.args.len() != 1 + op.operands.len() {
        return Err(Error::verify("loop region takes the induction variable plus one argument per init value"));
    }
    if !region.arg_types[0].is_scalar_of(ElemKind::I32) {
        return Err(Error::verify("induction variable must be an i32 scalar"));
    }
    for (init, arg_ty) in op.operands.iter().zip(&region.arg_types[1..]) {
        if ctx.ty(*init) != arg_ty {
            return Err(Error::verify("loop-carried argument type mismatch"));
        }
    }
    if op.result_types.len() != op.operands.len() {
        return Err(Error::verify("loop yields one result per init value"));
    }
    if !op.operands.is_empty() {
        match region.ops.last() {
            Some(y) if y.is("core", "yield") => {
                if y.operands.len() != op.operands.len() {
                    return Err(Error::verify("yield arity does not match loop-carried values"));
                }
                for (v, ty) in y.operands.iter().zip(&op.result_types) {
                    if ctx.ty(*v) != ty {
                        return Err(Error::verify("yield type does not match loop result"));
                    }
                }
            }
            _ => return Err(Error::verify("loop body must end with core.yield")),
        }
    }
    Ok(())
}

fn verify_alloc(_ctx: &VerifyCtx, op: &Op) -> Result<()> {
    expect_operands(op, 0)?;
    expect_results(op, 1)?;
    result_tensor(op, 0)?;
    Ok(())
}

// ---- builder helpers ----------------------------------------------------

/// Accumulates ops for a region while allocating values in the owning
/// function; the transformation passes build all their IR through this.
pub struct BodyBuilder<'f> {
    pub func: &'f mut Function,
    pub ops: Vec<Op>,
}

impl<'f> BodyBuilder<'f> {
    pub fn new(func: &'f mut Function) -> BodyBuilder<'f> {
        BodyBuilder { func, ops: vec![] }
    }

    pub fn ty(&self, v: ValueId) -> Type {
        self.func.value_type(v).clone()
    }

    pub fn tensor_ty(&self, v: ValueId) -> TensorType {
        self.func.value_type(v).tensor().expect("tensor value").clone()
    }

    /// Pushes a finished builder with the given result types, returning the
    /// result ids.
    pub fn push(&mut self, b: OpBuilder, types: &[Type]) -> Vec<ValueId> {
        let (op, ids) = b.results(self.func, types);
        self.ops.push(op);
        ids
    }

    pub fn push1(&mut self, b: OpBuilder, ty: Type) -> ValueId {
        self.push(b, &[ty])[0]
    }

    pub fn push0(&mut self, b: OpBuilder) {
        self.ops.push(b.no_results());
    }

    pub fn const_i32(&mut self, v: i64) -> ValueId {
        self.push1(OpBuilder::new("core", "constant").attr_int("value", v), scalar_i32())
    }

    pub fn const_list(&mut self, ty: TensorType, values: Vec<i64>) -> ValueId {
        self.push1(OpBuilder::new("core", "constant").attr_list("value", values), ty.into())
    }

    pub fn splat(&mut self, ty: TensorType, v: i64) -> ValueId {
        self.push1(OpBuilder::new("core", "splat").attr_int("value", v), ty.into())
    }

    pub fn splat_dyn(&mut self, ty: TensorType, v: ValueId) -> ValueId {
        self.push1(OpBuilder::new("core", "splat").operands(&[v]), ty.into())
    }

    pub fn addi(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.push1(OpBuilder::new("core", "addi").operands(&[a, b]), scalar_i32())
    }

    pub fn muli(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.push1(OpBuilder::new("core", "muli").operands(&[a, b]), scalar_i32())
    }

    pub fn extract_slice(&mut self, src: ValueId, offs: &[ValueId], sizes: &[usize]) -> ValueId {
        let elem = self.tensor_ty(src).elem;
        let mut operands = vec![src];
        operands.extend_from_slice(offs);
        self.push1(
            OpBuilder::new("core", "extract_slice")
                .operands(&operands)
                .attr_list("sizes", sizes.iter().map(|s| *s as i64).collect()),
            TensorType::new(sizes.to_vec(), elem).into(),
        )
    }

    pub fn insert_slice(&mut self, dst: ValueId, val: ValueId, offs: &[ValueId]) -> ValueId {
        let ty = self.ty(dst);
        let mut operands = vec![dst, val];
        operands.extend_from_slice(offs);
        self.push1(OpBuilder::new("core", "insert_slice").operands(&operands), ty)
    }

    pub fn reshape(&mut self, src: ValueId, shape: Vec<usize>) -> ValueId {
        let elem = self.tensor_ty(src).elem;
        self.push1(
            OpBuilder::new("core", "reshape").operands(&[src]),
            TensorType::new(shape, elem).into(),
        )
    }

    pub fn permute(&mut self, src: ValueId, perm: &[usize]) -> ValueId {
        let t = self.tensor_ty(src);
        let shape: Vec<usize> = perm.iter().map(|p| t.shape[*p]).collect();
        self.push1(
            OpBuilder::new("core", "permute")
                .operands(&[src])
                .attr_list("perm", perm.iter().map(|p| *p as i64).collect()),
            TensorType::new(shape, t.elem).into(),
        )
    }

    pub fn cast(&mut self, src: ValueId, elem: ElemKind) -> ValueId {
        let t = self.tensor_ty(src);
        self.push1(
            OpBuilder::new("core", "cast").operands(&[src]),
            TensorType::new(t.shape, elem).into(),
        )
    }

    /// A structured counted loop. The closure receives (builder, iv, carried
    /// args) and returns the yielded values.
    pub fn for_loop(
        &mut self,
        bounds: (i64, i64, i64),
        inits: &[ValueId],
        f: impl FnOnce(&mut BodyBuilder, ValueId, &[ValueId]) -> Vec<ValueId>,
    ) -> Vec<ValueId> {
        let (lower, upper, step) = bounds;
        let iv = self.func.new_value(scalar_i32());
        let init_types: Vec<Type> = inits.iter().map(|v| self.ty(*v)).collect();
        let args: Vec<ValueId> = init_types.iter().map(|t| self.func.new_value(t.clone())).collect();
        let mut inner = BodyBuilder::new(self.func);
        let yields = f(&mut inner, iv, &args);
        let mut ops = inner.ops;
        ops.push(OpBuilder::new("core", "yield").operands(&yields).no_results());
        let mut region_args = vec![iv];
        region_args.extend_from_slice(&args);
        let mut arg_types = vec![scalar_i32()];
        arg_types.extend(init_types.iter().cloned());
        let region = Region { args: region_args, arg_types, ops };
        self.push(
            OpBuilder::new("core", "for")
                .operands(inits)
                .attr_int("lower", lower)
                .attr_int("upper", upper)
                .attr_int("step", step)
                .region(region),
            &init_types,
        )
    }
}
