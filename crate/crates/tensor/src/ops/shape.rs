use std::rc::Rc;

use super::{norm_axis, reduce_to_shape};
use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_offset, numel, split_at_axis, strides, Tensor};

fn permute_data<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let s = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
    let xd = x.data();
    let mut out = Vec::with_capacity(x.numel());
    for_each_offset(&out_shape, [&src_strides], |[i]| out.push(xd[i]));
    Tensor::new(out_shape, out).expect("permute")
}

impl<'t, T: Real> Var<'t, T> {
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let shape = shape.into();
        let x = self.value();
        let old = x.shape().to_vec();
        let value = x.reshape(shape)?;
        self.tape().push("reshape", &[self], Rc::new(value), move |g| {
            vec![Some(g.clone().with_shape(old))]
        })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                reason: format!("{axes:?} is not a permutation of 0..{rank}"),
            });
        }
        let value = permute_data(&x, axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape().push("permute", &[self], Rc::new(value), move |g| vec![Some(permute_data(g, &inverse))])
    }

    pub fn transpose(self, a: isize, b: isize) -> Result<Var<'t, T>> {
        let rank = self.shape().len();
        let (a, b) = (norm_axis("transpose", a, rank)?, norm_axis("transpose", b, rank)?);
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(vars: &[Var<'t, T>], axis: isize) -> Result<Var<'t, T>> {
        let first = vars.first().ok_or(TensorError::InvalidArgument { op: "concat", reason: "no inputs".into() })?;
        let tape = first.tape();
        let values: Vec<Rc<Tensor<T>>> = vars.iter().map(|v| v.value()).collect();
        let rank = values[0].rank();
        let ax = norm_axis("concat", axis, rank)?;
        for v in &values[1..] {
            let ok = v.rank() == rank
                && v.shape().iter().zip(values[0].shape()).enumerate().all(|(i, (a, b))| i == ax || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[ax]).collect();
        let total: usize = sizes.iter().sum();
        let mut out_shape = values[0].shape().to_vec();
        out_shape[ax] = total;
        let (outer, _, inner) = split_at_axis(&out_shape, ax);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (v, &s) in values.iter().zip(&sizes) {
                out.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        tape.push("concat", vars, Rc::new(Tensor::new(out_shape, out)?), move |g| {
            let gd = g.data();
            let mut parts: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(numel(s))).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (p, &s) in parts.iter_mut().zip(&sizes) {
                    p.extend_from_slice(&gd[off..off + s * inner]);
                    off += s * inner;
                }
            }
            parts
                .into_iter()
                .zip(shapes)
                .map(|(p, s)| Some(Tensor::new(s, p).expect("concat grad")))
                .collect()
        })
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(self, axis: isize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let ax = norm_axis("narrow", axis, shape.len())?;
        if start + len > shape[ax] {
            return Err(TensorError::InvalidArgument {
                op: "narrow",
                reason: format!("range {start}..{} exceeds extent {} of {shape:?}", start + len, shape[ax]),
            });
        }
        let (outer, size, inner) = split_at_axis(&shape, ax);
        let mut out_shape = shape.clone();
        out_shape[ax] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * size + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        self.tape().push("narrow", &[self], Rc::new(Tensor::new(out_shape, out)?), move |g| {
            let mut dx = vec![T::zero(); numel(&shape)];
            for o in 0..outer {
                let base = (o * size + start) * inner;
                dx[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(shape, dx).expect("narrow grad"))]
        })
    }

    /// Splits along `axis` into pieces of the given sizes.
    pub fn split(self, axis: isize, sizes: &[usize]) -> Result<Vec<Var<'t, T>>> {
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &s in sizes {
            parts.push(self.narrow(axis, start, s)?);
            start += s;
        }
        Ok(parts)
    }

    /// Gathers rows (axis 0) by index; repeated indices accumulate gradient.
    pub fn index_select(self, indices: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.is_empty() {
            return Err(TensorError::InvalidShape { op: "index_select", shape, reason: "rank 0".into() });
        }
        let row = numel(&shape[1..]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(TensorError::InvalidArgument {
                op: "index_select",
                reason: format!("index {bad} out of range for {} rows", shape[0]),
            });
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
        }
        let idx = indices.to_vec();
        self.tape().push("index_select", &[self], Rc::new(Tensor::new(out_shape, out)?), move |g| {
            let mut dx = vec![T::zero(); numel(&shape)];
            for (k, &i) in idx.iter().enumerate() {
                for (d, &gv) in dx[i * row..(i + 1) * row].iter_mut().zip(&g.data()[k * row..(k + 1) * row]) {
                    *d += gv;
                }
            }
            vec![Some(Tensor::new(shape, dx).expect("index_select grad"))]
        })
    }

    /// Expands to `shape` under broadcasting rules.
    pub fn broadcast_to(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let shape = shape.into();
        let x = self.value();
        let src = x.shape().to_vec();
        if broadcast_shape(&src, &shape).as_deref() != Some(&shape[..]) {
            return Err(TensorError::ShapeMismatch { op: "broadcast_to", lhs: src, rhs: shape });
        }
        let bs = broadcast_strides(&src, &shape);
        let xd = x.data();
        let mut out = Vec::with_capacity(numel(&shape));
        for_each_offset(&shape, [&bs], |[i]| out.push(xd[i]));
        self.tape().push("broadcast_to", &[self], Rc::new(Tensor::new(shape, out)?), move |g| {
            vec![Some(reduce_to_shape(g, &src))]
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor, Var};

    #[test]
    fn concat_shape_arithmetic() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::ones([2, 4]));
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 7]);
        assert_eq!(c.value().data()[3], 1.0);
        assert_eq!(c.value().data()[7], 0.0);
        let bad = tape.constant(Tensor::zeros([3, 4]));
        assert!(Var::concat(&[a, bad], 1).is_err());
    }

    #[test]
    fn permute_roundtrip_and_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn([2, 3, 4], |i| i as f64));
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), vec![4, 2, 3]);
        assert_eq!(y.value().get(&[3, 1, 2]), x.value().get(&[1, 2, 3]));
        let w = tape.constant(Tensor::from_fn([4, 2, 3], |i| i as f64));
        let loss = y.mul(w).unwrap().sum_all().unwrap();
        let mut g = tape.backward(loss).unwrap();
        let gx = g.take(x);
        assert_eq!(gx.get(&[1, 2, 3]), w.value().get(&[3, 1, 2]));
    }

    #[test]
    fn index_select_accumulates_duplicates() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn([3, 2], |i| i as f64));
        let y = x.index_select(&[2, 0, 2]).unwrap();
        assert_eq!(y.value().data(), &[4., 5., 0., 1., 4., 5.]);
        let mut g = tape.backward(y.sum_all().unwrap()).unwrap();
        assert_eq!(g.take(x).data(), &[1., 1., 0., 0., 2., 2.]);
    }

    #[test]
    fn narrow_and_split() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([2, 5], |i| i as f64));
        let parts = x.split(1, &[2, 3]).unwrap();
        assert_eq!(parts[0].value().data(), &[0., 1., 5., 6.]);
        assert_eq!(parts[1].value().data(), &[2., 3., 4., 7., 8., 9.]);
        assert!(x.narrow(1, 4, 2).is_err());
    }
}
