//! Forward operations with reverse-mode gradient rules.
//!
//! Every op takes the [`Tape`] first, validates shapes, computes the result,
//! counts flops (multiply-accumulates × 2 for conv/matmul, per-element costs
//! for the rest) and registers its backward closure. Ops never broadcast
//! except scalar-with-tensor; mismatched shapes are hard errors.

mod conv;
mod elementwise;
mod matmul;
mod norm;
mod shape;
mod softmax;

pub use conv::conv2d;
pub use elementwise::{
    add, add_scalar, clamp, div, exp, gelu, maximum, minimum, mul, mul_scalar, neg, relu, sigmoid,
    softplus, sub,
};
pub use matmul::{bmm, bmm_t, linear, matmul};
pub use norm::{batch_norm_eval, batch_norm_train, layer_norm_channels, layer_norm_last};
pub use shape::{
    concat, index_select_rows, nearest_upsample, pad, permute, reshape, slice, sum_all,
};
pub use softmax::softmax;

use super::{debug_check_finite, Tape, Tensor};
use crate::error::{Error, Result};

pub(crate) fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Sum every tensor in `parts` (same shape). Empty input is an error.
pub fn sum_tensors(tape: &Tape, parts: &[Tensor]) -> Result<Tensor> {
    let mut it = parts.iter();
    let first = it
        .next()
        .ok_or_else(|| Error::Config("sum_tensors: empty input".into()))?;
    let mut acc = first.clone();
    for t in it {
        acc = add(tape, &acc, t)?;
    }
    Ok(acc)
}

/// Mean of all elements as a scalar tensor.
pub fn mean_all(tape: &Tape, x: &Tensor) -> Tensor {
    let n = x.len().max(1) as f64;
    mul_scalar(tape, &sum_all(tape, x), 1.0 / n)
}
