//! Differentiable operations on [`Var`](crate::Var).

mod conv;
mod elementwise;
mod matmul;
mod norm;
mod reduce;
pub mod sample;
mod shape;

pub use conv::Conv2dOptions;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_offset, numel, strides, Tensor};

/// Applies `f` over the broadcast of `a` and `b`.
pub(crate) fn broadcast_binary<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let (ad, bd) = (a.data(), b.data());
    let n = numel(&out_shape);
    let data: Vec<T> = if a.shape() == b.shape() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if bd.len() == 1 && ad.len() == n {
        let y = bd[0];
        ad.iter().map(|&x| f(x, y)).collect()
    } else if ad.len() == 1 && bd.len() == n {
        let x = ad[0];
        bd.iter().map(|&y| f(x, y)).collect()
    } else if ad.len() == n && is_trailing_block(b.shape(), &out_shape) {
        // rhs repeats every bd.len() elements (bias-style broadcast)
        let m = bd.len();
        let mut out = Vec::with_capacity(n);
        for chunk in ad.chunks(m) {
            out.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        }
        out
    } else {
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let mut out = Vec::with_capacity(n);
        for_each_offset(&out_shape, [&sa, &sb], |[ia, ib]| out.push(f(ad[ia], bd[ib])));
        out
    };
    Tensor::new(out_shape, data)
}

/// True when `small`, with leading 1s stripped, is a suffix of `out`.
fn is_trailing_block(small: &[usize], out: &[usize]) -> bool {
    let lead = small.iter().take_while(|&&d| d == 1).count();
    let core = &small[lead..];
    !core.is_empty() && core.len() <= out.len() && out[out.len() - core.len()..] == *core
}

/// Sums `grad` (broadcast shape) down to `target`.
pub(crate) fn reduce_to_shape<T: Real>(grad: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if grad.shape() == target {
        return grad.clone();
    }
    let n = numel(target);
    if n == 1 {
        return Tensor::full(target.to_vec(), grad.sum());
    }
    let mut out = vec![T::zero(); n];
    let gd = grad.data();
    if is_trailing_block(target, grad.shape()) {
        for chunk in gd.chunks(n) {
            for (o, &g) in out.iter_mut().zip(chunk) {
                *o += g;
            }
        }
    } else {
        let gs = strides(grad.shape());
        let ts = broadcast_strides(target, grad.shape());
        for_each_offset(grad.shape(), [&gs, &ts], |[ig, it]| out[it] += gd[ig]);
    }
    Tensor::new(target.to_vec(), out).expect("reduce_to_shape")
}

/// Resolves a possibly negative axis.
pub(crate) fn norm_axis(op: &'static str, axis: isize, rank: usize) -> Result<usize> {
    let a = if axis < 0 { axis + rank as isize } else { axis };
    if a < 0 || a as usize >= rank.max(1) || rank == 0 {
        return Err(TensorError::InvalidArgument { op, reason: format!("axis {axis} out of range for rank {rank}") });
    }
    Ok(a as usize)
}
