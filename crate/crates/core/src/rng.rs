//! Seeded input generation: the seed fully determines every generated tensor,
//! so reruns are byte-identical.

use crate::ir::types::{ElemKind, TensorType};
use crate::tensor::TensorValue;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A tensor of the given type with seed-determined contents: full-range i32,
/// or 0/1 for i1.
pub fn random_tensor(rng: &mut ChaCha8Rng, ty: &TensorType) -> TensorValue {
    let n = ty.element_count();
    let data: Vec<i32> = match ty.elem {
        ElemKind::I32 => (0..n).map(|_| rng.gen::<i32>()).collect(),
        ElemKind::I1 => (0..n).map(|_| rng.gen_range(0..=1)).collect(),
    };
    TensorValue::new(ty.clone(), data).expect("generated data matches type")
}

/// Small-magnitude variant, handy for tests whose expected values should be
/// readable.
pub fn random_small_tensor(rng: &mut ChaCha8Rng, ty: &TensorType, bound: i32) -> TensorValue {
    let n = ty.element_count();
    let data: Vec<i32> = match ty.elem {
        ElemKind::I32 => (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
        ElemKind::I1 => (0..n).map(|_| rng.gen_range(0..=1)).collect(),
    };
    TensorValue::new(ty.clone(), data).expect("generated data matches type")
}

/// Deterministic inputs for a function signature, one tensor per argument.
pub fn inputs_for_sig(seed: u64, arg_types: &[crate::ir::Type]) -> Vec<TensorValue> {
    let mut rng = rng_for(seed);
    arg_types
        .iter()
        .map(|t| {
            let tt = t.tensor().expect("function arguments are tensors");
            random_tensor(&mut rng, tt)
        })
        .collect()
}
