use std::rc::Rc;

use super::norm_axis;
use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::{for_each_offset, numel, strides, Tensor};

/// Output shape (with and without kept dims) and strides mapping input
/// positions onto the reduced output.
struct Reduction {
    keep_shape: Vec<usize>,
    out_shape: Vec<usize>,
    in_strides: Vec<usize>,
    out_strides: Vec<usize>,
}

fn plan(op: &'static str, shape: &[usize], axes: &[isize], keepdim: bool) -> Result<Reduction> {
    let rank = shape.len();
    let mut reduce = vec![false; rank];
    for &a in axes {
        let ax = norm_axis(op, a, rank)?;
        if reduce[ax] {
            return Err(TensorError::InvalidArgument { op, reason: format!("axis {a} listed twice") });
        }
        reduce[ax] = true;
    }
    let keep_shape: Vec<usize> = shape.iter().zip(&reduce).map(|(&d, &r)| if r { 1 } else { d }).collect();
    let out_shape = if keepdim {
        keep_shape.clone()
    } else {
        shape.iter().zip(&reduce).filter(|(_, &r)| !r).map(|(&d, _)| d).collect()
    };
    let ks = strides(&keep_shape);
    let out_strides = ks.iter().zip(&reduce).map(|(&s, &r)| if r { 0 } else { s }).collect();
    Ok(Reduction { keep_shape, out_shape, in_strides: strides(shape), out_strides })
}

impl<'t, T: Real> Var<'t, T> {
    /// Sum over `axes` (negative axes count from the end).
    pub fn sum(self, axes: &[isize], keepdim: bool) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let p = plan("sum", &shape, axes, keepdim)?;
        let mut out = vec![T::zero(); numel(&p.keep_shape)];
        let xd = x.data();
        for_each_offset(&shape, [&p.in_strides, &p.out_strides], |[i, o]| out[o] += xd[i]);
        let value = Tensor::new(p.out_shape.clone(), out)?;
        self.tape().push("sum", &[self], Rc::new(value), move |g| {
            let gd = g.data();
            let mut dx = vec![T::zero(); numel(&shape)];
            for_each_offset(&shape, [&p.in_strides, &p.out_strides], |[i, o]| dx[i] = gd[o]);
            vec![Some(Tensor::new(shape, dx).expect("sum grad"))]
        })
    }

    pub fn mean(self, axes: &[isize], keepdim: bool) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let total = numel(&shape);
        let s = self.sum(axes, keepdim)?;
        let count = total / s.numel().max(1);
        s.mul_scalar(T::one() / T::from_f64(count as f64))
    }

    pub fn sum_all(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let value = Tensor::scalar(x.sum());
        self.tape().push("sum_all", &[self], Rc::new(value), move |g| vec![Some(Tensor::full(shape, g.item()))])
    }

    pub fn mean_all(self) -> Result<Var<'t, T>> {
        let n = self.numel();
        self.sum_all()?.mul_scalar(T::one() / T::from_f64(n as f64))
    }

    /// Max over `axes`; the gradient goes to one element per output, the
    /// lowest flat index among ties.
    pub fn max(self, axes: &[isize], keepdim: bool) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if x.numel() == 0 {
            return Err(TensorError::InvalidShape { op: "max", shape, reason: "empty tensor".into() });
        }
        let p = plan("max", &shape, axes, keepdim)?;
        let n_out = numel(&p.keep_shape);
        let mut best = vec![T::neg_infinity(); n_out];
        let mut arg = vec![usize::MAX; n_out];
        let xd = x.data();
        // row-major visit order means the first maximum seen has the lowest index
        for_each_offset(&shape, [&p.in_strides, &p.out_strides], |[i, o]| {
            if arg[o] == usize::MAX || xd[i] > best[o] {
                best[o] = xd[i];
                arg[o] = i;
            }
        });
        let value = Tensor::new(p.out_shape.clone(), best)?;
        self.tape().push("max", &[self], Rc::new(value), move |g| {
            let mut dx = vec![T::zero(); numel(&shape)];
            for (o, &i) in arg.iter().enumerate() {
                dx[i] += g.data()[o];
            }
            vec![Some(Tensor::new(shape, dx).expect("max grad"))]
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn mean_of_ones_is_one() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones([2, 3]));
        assert_eq!(x.mean(&[0, 1], false).unwrap().item(), 1.0);
        assert_eq!(x.mean_all().unwrap().item(), 1.0);
    }

    #[test]
    fn channelwise_max() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([2, 2], vec![1., 5., 2., 2.]).unwrap());
        let m = x.max(&[0], false).unwrap();
        assert_eq!(m.shape(), vec![2]);
        assert_eq!(m.value().data(), &[2., 5.]);
    }

    #[test]
    fn max_ties_route_gradient_to_lowest_index() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new([4], vec![3., 1., 3., 3.]).unwrap());
        let m = x.max(&[0], false).unwrap();
        let mut g = tape.backward(m).unwrap();
        assert_eq!(g.take(x).data(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn sum_keepdim_shapes() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones([2, 3, 4]));
        assert_eq!(x.sum(&[1], true).unwrap().shape(), vec![2, 1, 4]);
        assert_eq!(x.sum(&[-1], false).unwrap().shape(), vec![2, 3]);
        assert!(x.sum(&[3], false).is_err());
    }
}
