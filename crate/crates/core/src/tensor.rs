//! Dense integer tensors: the unit of all functional semantics.

use crate::error::{Error, Result};
use crate::ir::types::{ElemKind, TensorType};
use std::rc::Rc;

/// A dense row-major tensor of i32 (or i1, stored as 0/1 in i32 words).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorValue {
    pub ty: TensorType,
    pub data: Rc<Vec<i32>>,
}

impl TensorValue {
    pub fn new(ty: TensorType, data: Vec<i32>) -> Result<TensorValue> {
        if data.len() != ty.element_count() {
            return Err(Error::invalid(format!(
                "tensor data length {} does not match type {} ({} elements)",
                data.len(),
                ty,
                ty.element_count()
            )));
        }
        if ty.elem == ElemKind::I1 {
            if let Some(bad) = data.iter().find(|v| **v != 0 && **v != 1) {
                return Err(Error::invalid(format!("i1 tensor holds non-boolean value {}", bad)));
            }
        }
        Ok(TensorValue { ty, data: Rc::new(data) })
    }

    pub fn zeros(ty: TensorType) -> TensorValue {
        let n = ty.element_count();
        TensorValue { ty, data: Rc::new(vec![0; n]) }
    }

    pub fn splat(ty: TensorType, value: i32) -> Result<TensorValue> {
        let n = ty.element_count();
        TensorValue::new(ty, vec![value; n])
    }

    pub fn scalar_i32(v: i32) -> TensorValue {
        TensorValue { ty: TensorType::scalar(ElemKind::I32), data: Rc::new(vec![v]) }
    }

    pub fn scalar_i1(v: bool) -> TensorValue {
        TensorValue { ty: TensorType::scalar(ElemKind::I1), data: Rc::new(vec![v as i32]) }
    }

    pub fn from_vec_i32(shape: Vec<usize>, data: Vec<i32>) -> Result<TensorValue> {
        TensorValue::new(TensorType::i32(shape), data)
    }

    /// The single element of a rank-0 tensor.
    pub fn unwrap_scalar(&self) -> Result<i32> {
        if self.ty.rank() != 0 {
            return Err(Error::exec(format!("expected scalar, found {}", self.ty)));
        }
        Ok(self.data[0])
    }

    pub fn shape(&self) -> &[usize] {
        &self.ty.shape
    }

    /// Row-major strides for this tensor's shape.
    pub fn strides(&self) -> Vec<usize> {
        row_major_strides(&self.ty.shape)
    }
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Deterministic FNV-1a checksum over shape and contents, used by metrics
/// reports.
pub fn checksum(tensors: &[TensorValue]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut mix = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    };
    for t in tensors {
        for d in &t.ty.shape {
            for b in (*d as u64).to_le_bytes() {
                mix(b);
            }
        }
        for v in t.data.iter() {
            for b in v.to_le_bytes() {
                mix(b);
            }
        }
    }
    format!("{:016x}", h)
}
