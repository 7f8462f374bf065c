use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::real::{gemm, MatView, Real};
use crate::tape::Var;
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_offset, numel, Tensor};

struct Plan {
    batch: Vec<usize>,
    a_batch_strides: Vec<usize>,
    b_batch_strides: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

fn plan(a: &[usize], b: &[usize]) -> Result<Plan> {
    let mismatch = || TensorError::ShapeMismatch { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch = broadcast_shape(ab, bb).ok_or_else(mismatch)?;
    Ok(Plan {
        a_batch_strides: broadcast_strides(ab, &batch).iter().map(|s| s * m * k).collect(),
        b_batch_strides: broadcast_strides(bb, &batch).iter().map(|s| s * k * n).collect(),
        batch,
        m,
        k,
        n,
    })
}

/// Plain `[m,k] x [k,n]` product of row-major buffers.
pub(crate) fn matmul_2d<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(MatView::row_major(a, m, k), MatView::row_major(b, k, n), &mut out, false);
    out
}

impl<'t, T: Real> Var<'t, T> {
    /// Matrix product over the last two axes with broadcast batch axes.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        let p = plan(a.shape(), b.shape())?;
        let (m, k, n) = (p.m, p.k, p.n);
        let mut out_shape = p.batch.clone();
        out_shape.extend([m, n]);

        let folded = b.rank() == 2;
        let out = if folded {
            let rows = a.numel() / k.max(1);
            matmul_2d(a.data(), b.data(), rows, k, n)
        } else {
            let mut out = vec![T::zero(); numel(&out_shape)];
            let mut bi = 0;
            for_each_offset(&p.batch, [&p.a_batch_strides, &p.b_batch_strides], |[ia, ib]| {
                gemm(
                    MatView::row_major(&a.data()[ia..ia + m * k], m, k),
                    MatView::row_major(&b.data()[ib..ib + k * n], k, n),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
                bi += 1;
            });
            out
        };

        self.tape().push("matmul", &[self, rhs], Rc::new(Tensor::new(out_shape, out)?), move |g| {
            let gd = g.data();
            let mut da = vec![T::zero(); a.numel()];
            let mut db = vec![T::zero(); b.numel()];
            if folded {
                let rows = a.numel() / k.max(1);
                // dA = dC * B^T, dB = A^T * dC
                gemm(MatView::row_major(gd, rows, n), MatView::transposed(b.data(), n, k), &mut da, false);
                gemm(MatView::transposed(a.data(), k, rows), MatView::row_major(gd, rows, n), &mut db, false);
            } else {
                let mut bi = 0;
                for_each_offset(&p.batch, [&p.a_batch_strides, &p.b_batch_strides], |[ia, ib]| {
                    let gslice = &gd[bi * m * n..(bi + 1) * m * n];
                    gemm(
                        MatView::row_major(gslice, m, n),
                        MatView::transposed(&b.data()[ib..ib + k * n], n, k),
                        &mut da[ia..ia + m * k],
                        true,
                    );
                    gemm(
                        MatView::transposed(&a.data()[ia..ia + m * k], k, m),
                        MatView::row_major(gslice, m, n),
                        &mut db[ib..ib + k * n],
                        true,
                    );
                    bi += 1;
                });
            }
            vec![
                Some(Tensor::new(a.shape().to_vec(), da).expect("matmul grad")),
                Some(Tensor::new(b.shape().to_vec(), db).expect("matmul grad")),
            ]
        })
    }

    /// `self @ weight + bias` for `weight: [in, out]`, `bias: [out]`.
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn identity_product() {
        let tape = Tape::<f64>::new();
        let i = tape.constant(Tensor::eye(2));
        let x = tape.constant(Tensor::new([2, 2], vec![1., 2., 3., 4.]).unwrap());
        assert_eq!(i.matmul(x).unwrap().value().data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn hand_product() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::new([2, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = tape.constant(Tensor::new([2, 1], vec![5., 6.]).unwrap());
        let c = a.matmul(b).unwrap();
        assert_eq!(c.shape(), vec![2, 1]);
        assert_eq!(c.value().data(), &[17., 39.]);
    }

    #[test]
    fn inner_dimension_mismatch_names_both_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([4, 2]));
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn batched_broadcast_matches_loop() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn([3, 2, 4], |i| (i as f64).sin()));
        let b = tape.constant(Tensor::from_fn([1, 4, 5], |i| (i as f64).cos()));
        let c = a.matmul(b).unwrap().value();
        assert_eq!(c.shape(), &[3, 2, 5]);
        for bi in 0..3 {
            for i in 0..2 {
                for j in 0..5 {
                    let want: f64 = (0..4).map(|k| a.value().get(&[bi, i, k]) * b.value().get(&[0, k, j])).sum();
                    assert!((c.get(&[bi, i, j]) - want).abs() < 1e-12);
                }
            }
        }
    }
}
