use std::rc::Rc;

use super::norm_axis;
use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::{split_at_axis, Tensor};

impl<'t, T: Real> Var<'t, T> {
    /// Normalises over `axis` and applies per-channel `gamma`, `beta` (both `[C]`).
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, axis: isize, eps: f64) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let ax = norm_axis("layer_norm", axis, shape.len())?;
        let (outer, c, inner) = split_at_axis(&shape, ax);
        let (gv, bv) = (gamma.value(), beta.value());
        for p in [&gv, &bv] {
            if p.shape() != [c] {
                return Err(TensorError::ShapeMismatch { op: "layer_norm", lhs: shape.clone(), rhs: p.shape().to_vec() });
            }
        }
        let n = T::from_f64(c as f64);
        let eps = T::from_f64(eps);
        let xd = x.data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * c + k) * inner + i;
                let mean = (0..c).map(|k| xd[at(k)]).sum::<T>() / n;
                let var = (0..c).map(|k| (xd[at(k)] - mean) * (xd[at(k)] - mean)).sum::<T>() / n;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for k in 0..c {
                    let h = (xd[at(k)] - mean) * r;
                    xhat[at(k)] = h;
                    out[at(k)] = h * gv.data()[k] + bv.data()[k];
                }
            }
        }
        self.tape().push("layer_norm", &[self, gamma, beta], Rc::new(Tensor::new(shape.clone(), out)?), move |g| {
            let gd = g.data();
            let gamma = gv.data();
            let mut dx = vec![T::zero(); gd.len()];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * c + k) * inner + i;
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for k in 0..c {
                        let dh = gd[at(k)] * gamma[k];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[at(k)];
                        dgamma[k] += gd[at(k)] * xhat[at(k)];
                        dbeta[k] += gd[at(k)];
                    }
                    mean_dh /= n;
                    mean_dh_h /= n;
                    let r = rstd[o * inner + i];
                    for k in 0..c {
                        let dh = gd[at(k)] * gamma[k];
                        dx[at(k)] = r * (dh - mean_dh - xhat[at(k)] * mean_dh_h);
                    }
                }
            }
            vec![
                Some(Tensor::new(shape, dx).expect("layer_norm dx")),
                Some(Tensor::new([c], dgamma).expect("layer_norm dgamma")),
                Some(Tensor::new([c], dbeta).expect("layer_norm dbeta")),
            ]
        })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: isize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let ax = norm_axis("softmax", axis, shape.len())?;
        let (outer, c, inner) = split_at_axis(&shape, ax);
        let xd = x.data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * c + k) * inner + i;
                let m = (0..c).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..c {
                    let e = (xd[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..c {
                    out[at(k)] /= z;
                }
            }
        }
        let out = Rc::new(Tensor::new(shape, out)?);
        let y = Rc::clone(&out);
        self.tape().push("softmax", &[self], out, move |g| {
            let (gd, yd) = (g.data(), y.data());
            let mut dx = vec![T::zero(); gd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * c + k) * inner + i;
                    let dot = (0..c).map(|k| gd[at(k)] * yd[at(k)]).sum::<T>();
                    for k in 0..c {
                        dx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(y.shape().to_vec(), dx).expect("softmax grad"))]
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn layer_norm_zero_mean_unit_variance() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([2, 4, 3], |i| ((i * 7) % 5) as f64 + 0.1 * i as f64));
        let y = x
            .layer_norm(tape.constant(Tensor::ones([4])), tape.constant(Tensor::zeros([4])), 1, 1e-12)
            .unwrap()
            .value();
        for o in 0..2 {
            for i in 0..3 {
                let v: Vec<f64> = (0..4).map(|k| y.get(&[o, k, i])).collect();
                let mean = v.iter().sum::<f64>() / 4.0;
                let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0;
                assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_even_for_large_logits() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new([2, 3], vec![1000., 1001., 1002., -5., 0., 5.]).unwrap());
        let y = x.softmax(-1).unwrap().value();
        for r in 0..2 {
            let s: f32 = (0..3).map(|k| y.get(&[r, k])).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(y.all_finite());
    }

    #[test]
    fn softmax_gradient_of_sum_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn([3, 4], |i| (i as f64).sin()));
        let loss = x.softmax(1).unwrap().sum_all().unwrap();
        let mut g = tape.backward(loss).unwrap();
        assert!(g.take(x).data().iter().all(|v| v.abs() < 1e-12));
    }
}
