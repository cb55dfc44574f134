//! Rewrites that turn convolutions and tensor contractions into GEMM, the
//! form both acceleration paradigms consume.

use crate::coreops::BodyBuilder;
use crate::error::{Error, Result};
use crate::ir::types::TensorType;
use crate::ir::{Function, Module, Op, OpBuilder};
use crate::pass::PassSpec;
use crate::semantics::parse_einsum;
use crate::tensor::row_major_strides;

/// Replaces every cinm.conv2d (NHWC input, HWCF filter, stride 1, no
/// padding) with an explicit im2col gather into a (N*H'*W') x (Kh*Kw*C)
/// matrix, one cinm.gemm, and a reshape back to NHWC.
pub fn conv2d_to_gemm(module: &mut Module) -> Result<()> {
    for func in &mut module.functions {
        while let Some(pos) = func.body.ops.iter().position(|op| op.is("cinm", "conv2d")) {
            rewrite_conv(func, pos)?;
        }
    }
    Ok(())
}

fn rewrite_conv(func: &mut Function, pos: usize) -> Result<()> {
    let op = func.body.ops[pos].clone();
    if op.attr_int("stride").unwrap_or(1) != 1 || op.attr_int("pad").unwrap_or(0) != 0 {
        return Err(Error::invalid("unsupported conv form"));
    }
    let result_id = op.results[0];
    let input = op.operands[0];
    let filter = op.operands[1];
    let ishape = func.value_type(input).tensor().unwrap().shape.clone();
    let fshape = func.value_type(filter).tensor().unwrap().shape.clone();
    let (n, h, w, c) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (kh, kw, _fc, f) = (fshape[0], fshape[1], fshape[2], fshape[3]);
    let (oh, ow) = (h - kh + 1, w - kw + 1);

    // Row r of the im2col matrix holds the receptive field of output pixel r
    // in (kh, kw, c) order, matching the filter's HWCF layout after reshape.
    let rows = n * oh * ow;
    let cols = kh * kw * c;
    let istr = row_major_strides(&[n, h, w, c]);
    let mut indices = Vec::with_capacity(rows * cols);
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                for dy in 0..kh {
                    for dx in 0..kw {
                        for ch in 0..c {
                            let flat =
                                b * istr[0] + (y + dy) * istr[1] + (x + dx) * istr[2] + ch;
                            indices.push(flat as i64);
                        }
                    }
                }
            }
        }
    }

    let mut bb = BodyBuilder::new(func);
    let flat_in = bb.reshape(input, vec![n * h * w * c]);
    let idx = bb.const_list(TensorType::i32(vec![rows * cols]), indices);
    let gathered = bb.push1(
        OpBuilder::new("core", "gather").operands(&[flat_in, idx]),
        TensorType::i32(vec![rows * cols]).into(),
    );
    let im2col = bb.reshape(gathered, vec![rows, cols]);
    let filter_mat = bb.reshape(filter, vec![cols, f]);
    let prod = bb.push1(
        OpBuilder::new("cinm", "gemm").operands(&[im2col, filter_mat]),
        TensorType::i32(vec![rows, f]).into(),
    );
    bb.reshape(prod, vec![n, oh, ow, f]);
    let mut ops = bb.ops;
    ops.last_mut().unwrap().results[0] = result_id;
    func.body.ops.splice(pos..=pos, ops);
    Ok(())
}

/// Replaces every two-input cinm.contract with transposes/reshapes plus one
/// cinm.gemm: free indices of the first input become rows, free indices of
/// the second become columns, contracted indices the shared dimension.
pub fn contract_to_gemm(module: &mut Module) -> Result<()> {
    for func in &mut module.functions {
        while let Some(pos) = func.body.ops.iter().position(|op| op.is("cinm", "contract")) {
            rewrite_contract(func, pos)?;
        }
    }
    Ok(())
}

fn rewrite_contract(func: &mut Function, pos: usize) -> Result<()> {
    let op = func.body.ops[pos].clone();
    let spec = op.attr_str("spec").unwrap().to_string();
    let (ins, out) = parse_einsum(&spec)?;
    let (ia, ib): (Vec<char>, Vec<char>) = (ins[0].chars().collect(), ins[1].chars().collect());
    let result_id = op.results[0];
    let a = op.operands[0];
    let b = op.operands[1];
    let ashape = func.value_type(a).tensor().unwrap().shape.clone();
    let bshape = func.value_type(b).tensor().unwrap().shape.clone();

    let mut extent = std::collections::BTreeMap::new();
    for (cname, d) in ia.iter().zip(&ashape).chain(ib.iter().zip(&bshape)) {
        extent.insert(*cname, *d);
    }
    let out_chars: Vec<char> = out.chars().collect();
    for oc in &out_chars {
        if ia.contains(oc) && ib.contains(oc) {
            return Err(Error::invalid(format!(
                "contraction index '{}' appears in both inputs and the output",
                oc
            )));
        }
    }
    // Contracted indices, in first-input order.
    let contracted: Vec<char> =
        ia.iter().copied().filter(|c| ib.contains(c) && !out_chars.contains(c)).collect();
    let free_a: Vec<char> = ia.iter().copied().filter(|c| out_chars.contains(c)).collect();
    let free_b: Vec<char> = ib.iter().copied().filter(|c| out_chars.contains(c)).collect();
    if free_a.len() + free_b.len() != out_chars.len() {
        return Err(Error::invalid("contraction output indices must come from the inputs"));
    }
    for (label, chars) in [("first", &ia), ("second", &ib)] {
        for ch in chars {
            if !free_a.contains(ch) && !free_b.contains(ch) && !contracted.contains(ch) {
                return Err(Error::invalid(format!(
                    "index '{}' of the {} input is neither free nor contracted",
                    ch, label
                )));
            }
        }
    }

    let dim = |cs: &[char]| -> usize { cs.iter().map(|c| extent[c]).product::<usize>().max(1) };
    let (ra, rc, rb) = (dim(&free_a), dim(&contracted), dim(&free_b));

    let perm_for = |src: &[char], want: &[char]| -> Vec<usize> {
        want.iter().map(|c| src.iter().position(|s| s == c).unwrap()).collect()
    };

    let mut bb = BodyBuilder::new(func);
    // A -> (free_a | contracted), reshaped to ra x rc.
    let want_a: Vec<char> = free_a.iter().chain(contracted.iter()).copied().collect();
    let pa = perm_for(&ia, &want_a);
    let a_perm = if pa.iter().enumerate().all(|(i, p)| i == *p) { a } else { bb.permute(a, &pa) };
    let a_mat = bb.reshape(a_perm, vec![ra, rc]);
    // B -> (contracted | free_b), reshaped to rc x rb.
    let want_b: Vec<char> = contracted.iter().chain(free_b.iter()).copied().collect();
    let pb = perm_for(&ib, &want_b);
    let b_perm = if pb.iter().enumerate().all(|(i, p)| i == *p) { b } else { bb.permute(b, &pb) };
    let b_mat = bb.reshape(b_perm, vec![rc, rb]);
    let prod = bb.push1(
        OpBuilder::new("cinm", "gemm").operands(&[a_mat, b_mat]),
        TensorType::i32(vec![ra, rb]).into(),
    );
    // (free_a | free_b) -> output order.
    let natural: Vec<char> = free_a.iter().chain(free_b.iter()).copied().collect();
    let natural_shape: Vec<usize> = natural.iter().map(|c| extent[c]).collect();
    let unflat = bb.reshape(prod, natural_shape);
    let pout = perm_for(&natural, &out_chars);
    if pout.iter().enumerate().all(|(i, p)| i == *p) {
        let out_shape: Vec<usize> = out_chars.iter().map(|c| extent[c]).collect();
        bb.reshape(unflat, out_shape);
    } else {
        bb.permute(unflat, &pout);
    }
    let mut ops = bb.ops;
    ops.last_mut().unwrap().results[0] = result_id;
    func.body.ops.splice(pos..=pos, ops);
    Ok(())
}

pub fn conv2d_to_gemm_pass(module: &mut Module, _spec: &PassSpec) -> Result<()> {
    conv2d_to_gemm(module)
}

pub fn contract_to_gemm_pass(module: &mut Module, _spec: &PassSpec) -> Result<()> {
    contract_to_gemm(module)
}

/// True when the op can enter the acceleration pipelines without rewriting.
pub fn is_staging_op(op: &Op) -> bool {
    op.is("cinm", "conv2d") || op.is("cinm", "contract")
}
