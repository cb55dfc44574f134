//! Pure evaluation semantics for the tensor compute operations.
//!
//! All i32 arithmetic wraps modulo 2^32 (two's complement), which makes every
//! result exactly reproducible across hosts. These functions are shared by
//! the reference interpreter and by the device models, which call them for
//! leaf- and tile-level compute (the device "library" routines).

use crate::error::{Error, Result};
use crate::ir::types::{ElemKind, TensorType};
use crate::tensor::{row_major_strides, TensorValue};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Prod,
    Min,
    Max,
}

impl ReduceKind {
    pub fn parse(tok: &str) -> Result<ReduceKind> {
        Ok(match tok {
            "sum" => ReduceKind::Sum,
            "prod" => ReduceKind::Prod,
            "min" => ReduceKind::Min,
            "max" => ReduceKind::Max,
            other => return Err(Error::invalid(format!("unknown reduce kind '{}'", other))),
        })
    }

    /// Identity element: padding with it never changes a reduction.
    pub fn identity(self) -> i32 {
        match self {
            ReduceKind::Sum => 0,
            ReduceKind::Prod => 1,
            ReduceKind::Min => i32::MAX,
            ReduceKind::Max => i32::MIN,
        }
    }

    pub fn apply(self, a: i32, b: i32) -> i32 {
        match self {
            ReduceKind::Sum => a.wrapping_add(b),
            ReduceKind::Prod => a.wrapping_mul(b),
            ReduceKind::Min => a.min(b),
            ReduceKind::Max => a.max(b),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogicKind {
    And,
    Or,
    Xor,
    Not,
    Nand,
    Nor,
}

impl LogicKind {
    pub fn parse(tok: &str) -> Result<LogicKind> {
        Ok(match tok {
            "and" => LogicKind::And,
            "or" => LogicKind::Or,
            "xor" => LogicKind::Xor,
            "not" => LogicKind::Not,
            "nand" => LogicKind::Nand,
            "nor" => LogicKind::Nor,
            other => return Err(Error::invalid(format!("unknown logic op '{}'", other))),
        })
    }

    pub fn is_unary(self) -> bool {
        matches!(self, LogicKind::Not)
    }

    pub fn apply(self, a: i32, b: i32) -> i32 {
        let (a, b) = (a != 0, b != 0);
        let r = match self {
            LogicKind::And => a && b,
            LogicKind::Or => a || b,
            LogicKind::Xor => a ^ b,
            LogicKind::Not => !a,
            LogicKind::Nand => !(a && b),
            LogicKind::Nor => !(a || b),
        };
        r as i32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Dot,
    L2,
}

impl Metric {
    pub fn parse(tok: &str) -> Result<Metric> {
        Ok(match tok {
            "dot" => Metric::Dot,
            "l2" => Metric::L2,
            other => return Err(Error::invalid(format!("unknown metric '{}'", other))),
        })
    }
}

pub fn elementwise_add(a: &TensorValue, b: &TensorValue) -> Result<TensorValue> {
    elementwise(a, b, i32::wrapping_add)
}

pub fn elementwise_sub(a: &TensorValue, b: &TensorValue) -> Result<TensorValue> {
    elementwise(a, b, i32::wrapping_sub)
}

fn elementwise(a: &TensorValue, b: &TensorValue, f: fn(i32, i32) -> i32) -> Result<TensorValue> {
    if a.ty != b.ty {
        return Err(Error::exec(format!("shape mismatch: {} vs {}", a.ty, b.ty)));
    }
    let data = a.data.iter().zip(b.data.iter()).map(|(x, y)| f(*x, *y)).collect();
    TensorValue::new(a.ty.clone(), data)
}

/// (m x k) . (k x n) -> (m x n), wrapping arithmetic.
pub fn gemm(a: &TensorValue, b: &TensorValue) -> Result<TensorValue> {
    let (m, k) = rank2(a)?;
    let (k2, n) = rank2(b)?;
    if k != k2 {
        return Err(Error::exec(format!("gemm inner dims differ: {} vs {}", k, k2)));
    }
    let mut out = vec![0i32; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a.data[i * k + kk];
            if av == 0 {
                continue;
            }
            let brow = &b.data[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o = o.wrapping_add(av.wrapping_mul(*bv));
            }
        }
    }
    TensorValue::from_vec_i32(vec![m, n], out)
}

/// (m x k) . (k) -> (m).
pub fn gemv(a: &TensorValue, x: &TensorValue) -> Result<TensorValue> {
    let (m, k) = rank2(a)?;
    if x.ty.shape != [k] {
        return Err(Error::exec(format!("gemv operand mismatch: {} vs {}", a.ty, x.ty)));
    }
    let mut out = vec![0i32; m];
    for i in 0..m {
        let mut acc = 0i32;
        for kk in 0..k {
            acc = acc.wrapping_add(a.data[i * k + kk].wrapping_mul(x.data[kk]));
        }
        out[i] = acc;
    }
    TensorValue::from_vec_i32(vec![m], out)
}

/// Full reduction of one tensor to a rank-0 scalar.
pub fn reduce(kind: ReduceKind, t: &TensorValue) -> Result<TensorValue> {
    if t.data.is_empty() {
        return Err(Error::exec("reduction of empty tensor".to_string()));
    }
    let mut acc = t.data[0];
    for v in &t.data[1..] {
        acc = kind.apply(acc, *v);
    }
    Ok(TensorValue::scalar_i32(acc))
}

/// Inclusive prefix of the same binary op as reduce; rank-1 input.
pub fn scan(kind: ReduceKind, t: &TensorValue) -> Result<TensorValue> {
    rank1(t)?;
    let mut out = Vec::with_capacity(t.data.len());
    let mut acc = kind.identity();
    for v in t.data.iter() {
        acc = kind.apply(acc, *v);
        out.push(acc);
    }
    TensorValue::new(t.ty.clone(), out)
}

pub fn logicop(kind: LogicKind, a: &TensorValue, b: Option<&TensorValue>) -> Result<TensorValue> {
    if a.ty.elem != ElemKind::I1 {
        return Err(Error::exec("logicop requires i1 tensors".into()));
    }
    let data = if kind.is_unary() {
        a.data.iter().map(|x| kind.apply(*x, 0)).collect()
    } else {
        let b = b.ok_or_else(|| Error::exec("binary logicop needs two operands".to_string()))?;
        if a.ty != b.ty {
            return Err(Error::exec(format!("shape mismatch: {} vs {}", a.ty, b.ty)));
        }
        a.data.iter().zip(b.data.iter()).map(|(x, y)| kind.apply(*x, *y)).collect()
    };
    TensorValue::new(a.ty.clone(), data)
}

/// Rank-2 transpose.
pub fn transpose(t: &TensorValue) -> Result<TensorValue> {
    let (m, n) = rank2(t)?;
    let mut out = vec![0i32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = t.data[i * n + j];
        }
    }
    TensorValue::from_vec_i32(vec![n, m], out)
}

/// Counts of values clamped into [0, bins).
pub fn histogram(bins: usize, t: &TensorValue) -> Result<TensorValue> {
    if bins == 0 {
        return Err(Error::exec("histogram needs at least one bin".into()));
    }
    let mut out = vec![0i32; bins];
    for v in t.data.iter() {
        let b = (*v).clamp(0, bins as i32 - 1) as usize;
        out[b] = out[b].wrapping_add(1);
    }
    TensorValue::from_vec_i32(vec![bins], out)
}

/// Rank-1 i1 -> scalar i1; 1 iff ones > length/2.
pub fn majority(t: &TensorValue) -> Result<TensorValue> {
    rank1(t)?;
    if t.ty.elem != ElemKind::I1 {
        return Err(Error::exec("majority requires an i1 tensor".into()));
    }
    let ones: usize = t.data.iter().map(|v| *v as usize).sum();
    Ok(TensorValue::scalar_i1(2 * ones > t.data.len()))
}

/// Counts 1s in an i1 tensor; returns a rank-0 i32.
pub fn popcount(t: &TensorValue) -> Result<TensorValue> {
    if t.ty.elem != ElemKind::I1 {
        return Err(Error::exec("popcount requires an i1 tensor".into()));
    }
    let ones: i32 = t.data.iter().sum();
    Ok(TensorValue::scalar_i32(ones))
}

/// K largest elements, values descending, ties broken by lower index first.
/// Returns (values, indices).
pub fn topk(k: usize, t: &TensorValue) -> Result<(TensorValue, TensorValue)> {
    rank1(t)?;
    if k > t.data.len() {
        return Err(Error::exec(format!("topk k={} exceeds length {}", k, t.data.len())));
    }
    let mut order: Vec<usize> = (0..t.data.len()).collect();
    order.sort_by(|&i, &j| t.data[j].cmp(&t.data[i]).then(i.cmp(&j)));
    let values: Vec<i32> = order[..k].iter().map(|&i| t.data[i]).collect();
    let indices: Vec<i32> = order[..k].iter().map(|&i| i as i32).collect();
    Ok((
        TensorValue::from_vec_i32(vec![k], values)?,
        TensorValue::from_vec_i32(vec![k], indices)?,
    ))
}

/// Scores a query against every corpus row. dot: larger is better;
/// l2 (wrapped sum of squared differences): smaller is better.
pub fn sim_scores(metric: Metric, query: &TensorValue, corpus: &TensorValue) -> Result<Vec<i32>> {
    let k = match query.ty.shape.as_slice() {
        [k] => *k,
        _ => return Err(Error::exec("simSearch query must be rank 1".into())),
    };
    let (n, k2) = rank2(corpus)?;
    if k != k2 {
        return Err(Error::exec(format!("simSearch width mismatch: {} vs {}", k, k2)));
    }
    let mut scores = Vec::with_capacity(n);
    for row in 0..n {
        let r = &corpus.data[row * k..(row + 1) * k];
        let mut acc = 0i32;
        match metric {
            Metric::Dot => {
                for (q, c) in query.data.iter().zip(r) {
                    acc = acc.wrapping_add(q.wrapping_mul(*c));
                }
            }
            Metric::L2 => {
                for (q, c) in query.data.iter().zip(r) {
                    let d = q.wrapping_sub(*c);
                    acc = acc.wrapping_add(d.wrapping_mul(d));
                }
            }
        }
        scores.push(acc);
    }
    Ok(scores)
}

/// Top `count` corpus rows by similarity, ties by lower row index.
/// Returns (scores, indices).
pub fn sim_search(
    metric: Metric,
    query: &TensorValue,
    corpus: &TensorValue,
    count: usize,
) -> Result<(TensorValue, TensorValue)> {
    let scores = sim_scores(metric, query, corpus)?;
    if count > scores.len() {
        return Err(Error::exec(format!(
            "simSearch count={} exceeds corpus rows {}",
            count,
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    match metric {
        Metric::Dot => order.sort_by(|&i, &j| scores[j].cmp(&scores[i]).then(i.cmp(&j))),
        Metric::L2 => order.sort_by(|&i, &j| scores[i].cmp(&scores[j]).then(i.cmp(&j))),
    }
    let vals: Vec<i32> = order[..count].iter().map(|&i| scores[i]).collect();
    let idxs: Vec<i32> = order[..count].iter().map(|&i| i as i32).collect();
    Ok((
        TensorValue::from_vec_i32(vec![count], vals)?,
        TensorValue::from_vec_i32(vec![count], idxs)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeKind {
    Sum,
    Concat,
}

impl MergeKind {
    pub fn parse(tok: &str) -> Result<MergeKind> {
        Ok(match tok {
            "sum" => MergeKind::Sum,
            "concat" => MergeKind::Concat,
            other => return Err(Error::invalid(format!("unknown merge kind '{}'", other))),
        })
    }
}

/// Accumulates a partial result: sum is elementwise accumulate, concat
/// appends along `axis`.
pub fn merge_partial(
    kind: MergeKind,
    axis: usize,
    acc: &TensorValue,
    part: &TensorValue,
) -> Result<TensorValue> {
    match kind {
        MergeKind::Sum => elementwise_add(acc, part),
        MergeKind::Concat => {
            if acc.ty.rank() != part.ty.rank() || axis >= acc.ty.rank() {
                return Err(Error::exec("mergePartial concat rank/axis mismatch".into()));
            }
            for (d, (a, p)) in acc.ty.shape.iter().zip(&part.ty.shape).enumerate() {
                if d != axis && a != p {
                    return Err(Error::exec("mergePartial concat off-axis extents differ".into()));
                }
            }
            let mut shape = acc.ty.shape.clone();
            shape[axis] += part.ty.shape[axis];
            let outer: usize = acc.ty.shape[..axis].iter().product();
            let acc_block: usize = acc.ty.shape[axis..].iter().product();
            let part_block: usize = part.ty.shape[axis..].iter().product();
            let mut data = Vec::with_capacity(acc.data.len() + part.data.len());
            for o in 0..outer {
                data.extend_from_slice(&acc.data[o * acc_block..(o + 1) * acc_block]);
                data.extend_from_slice(&part.data[o * part_block..(o + 1) * part_block]);
            }
            TensorValue::new(TensorType::new(shape, acc.ty.elem), data)
        }
    }
}

/// Direct 2D convolution: NHWC input, HWCF filter, stride 1, no padding.
pub fn conv2d(input: &TensorValue, filter: &TensorValue) -> Result<TensorValue> {
    let (n, h, w, c) = rank4(input)?;
    let (kh, kw, fc, f) = rank4(filter)?;
    if c != fc {
        return Err(Error::exec("conv2d channel mismatch".into()));
    }
    if kh > h || kw > w {
        return Err(Error::exec("conv2d filter larger than input".into()));
    }
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = vec![0i32; n * oh * ow * f];
    let istr = row_major_strides(&[n, h, w, c]);
    let fstr = row_major_strides(&[kh, kw, c, f]);
    let ostr = row_major_strides(&[n, oh, ow, f]);
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                for ff in 0..f {
                    let mut acc = 0i32;
                    for dy in 0..kh {
                        for dx in 0..kw {
                            for ch in 0..c {
                                let iv = input.data
                                    [b * istr[0] + (y + dy) * istr[1] + (x + dx) * istr[2] + ch];
                                let fv =
                                    filter.data[dy * fstr[0] + dx * fstr[1] + ch * fstr[2] + ff];
                                acc = acc.wrapping_add(iv.wrapping_mul(fv));
                            }
                        }
                    }
                    out[b * ostr[0] + y * ostr[1] + x * ostr[2] + ff] = acc;
                }
            }
        }
    }
    TensorValue::from_vec_i32(vec![n, oh, ow, f], out)
}

/// General two-input einsum contraction over single-letter indices,
/// e.g. "acd,dbc->ab". Wrapping arithmetic, brute-force loop nest.
pub fn einsum2(spec: &str, a: &TensorValue, b: &TensorValue) -> Result<TensorValue> {
    let (in_specs, out_spec) = parse_einsum(spec)?;
    if in_specs.len() != 2 {
        return Err(Error::exec("contraction requires exactly two inputs".into()));
    }
    let (ia, ib) = (&in_specs[0], &in_specs[1]);
    if ia.len() != a.ty.rank() || ib.len() != b.ty.rank() {
        return Err(Error::exec("einsum rank mismatch".into()));
    }
    // Bind every index letter to an extent.
    let mut extents: std::collections::BTreeMap<char, usize> = Default::default();
    for (idx, d) in ia.chars().zip(&a.ty.shape).chain(ib.chars().zip(&b.ty.shape)) {
        match extents.insert(idx, *d) {
            Some(prev) if prev != *d => {
                return Err(Error::exec(format!("einsum index '{}' extent mismatch", idx)))
            }
            _ => {}
        }
    }
    for o in out_spec.chars() {
        if !extents.contains_key(&o) {
            return Err(Error::exec(format!("einsum output index '{}' not in inputs", o)));
        }
    }
    let all: Vec<char> = {
        let mut v: Vec<char> = out_spec.chars().collect();
        for c in extents.keys() {
            if !v.contains(c) {
                v.push(*c);
            }
        }
        v
    };
    let out_shape: Vec<usize> = out_spec.chars().map(|c| extents[&c]).collect();
    let out_count: usize = out_shape.iter().product::<usize>().max(1);
    let mut out = vec![0i32; out_count];
    let astr = row_major_strides(&a.ty.shape);
    let bstr = row_major_strides(&b.ty.shape);
    let ostr = row_major_strides(&out_shape);
    // Odometer over every index in `all`; output indices come first.
    let dims: Vec<usize> = all.iter().map(|c| extents[c]).collect();
    let mut idx = vec![0usize; all.len()];
    loop {
        let mut ai = 0;
        for (p, c) in ia.chars().enumerate() {
            ai += idx[all.iter().position(|x| *x == c).unwrap()] * astr[p];
        }
        let mut bi = 0;
        for (p, c) in ib.chars().enumerate() {
            bi += idx[all.iter().position(|x| *x == c).unwrap()] * bstr[p];
        }
        let mut oi = 0;
        for (p, _c) in out_spec.chars().enumerate() {
            oi += idx[p] * ostr[p];
        }
        out[oi] = out[oi].wrapping_add(a.data[ai].wrapping_mul(b.data[bi]));
        // Advance odometer.
        let mut d = all.len();
        loop {
            if d == 0 {
                return TensorValue::from_vec_i32(out_shape, out);
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < dims[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Splits an einsum spec into input index strings and the output string.
pub fn parse_einsum(spec: &str) -> Result<(Vec<String>, String)> {
    let (ins, out) = spec
        .split_once("->")
        .ok_or_else(|| Error::invalid(format!("einsum spec '{}' missing '->'", spec)))?;
    let inputs: Vec<String> = ins.split(',').map(|s| s.trim().to_string()).collect();
    let out = out.trim().to_string();
    let mut seen = std::collections::BTreeSet::new();
    for c in out.chars() {
        if !c.is_ascii_lowercase() {
            return Err(Error::invalid(format!("einsum index '{}' must be a lowercase letter", c)));
        }
        if !seen.insert(c) {
            return Err(Error::invalid(format!("repeated output index '{}' in '{}'", c, spec)));
        }
    }
    for i in &inputs {
        let mut s = std::collections::BTreeSet::new();
        for c in i.chars() {
            if !c.is_ascii_lowercase() {
                return Err(Error::invalid(format!(
                    "einsum index '{}' must be a lowercase letter",
                    c
                )));
            }
            if !s.insert(c) {
                return Err(Error::invalid(format!("repeated input index '{}' in '{}'", c, spec)));
            }
        }
    }
    Ok((inputs, out))
}

fn rank1(t: &TensorValue) -> Result<usize> {
    match t.ty.shape.as_slice() {
        [n] => Ok(*n),
        _ => Err(Error::exec(format!("expected rank-1 tensor, found {}", t.ty))),
    }
}

fn rank2(t: &TensorValue) -> Result<(usize, usize)> {
    match t.ty.shape.as_slice() {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::exec(format!("expected rank-2 tensor, found {}", t.ty))),
    }
}

fn rank4(t: &TensorValue) -> Result<(usize, usize, usize, usize)> {
    match t.ty.shape.as_slice() {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        _ => Err(Error::exec(format!("expected rank-4 tensor, found {}", t.ty))),
    }
}
