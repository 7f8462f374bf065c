//! Bilinear sampling at fractional locations.
//!
//! Normalised coordinate `u` in `[0,1]` maps to pixel coordinate `u*W - 0.5`,
//! so `u = (j + 0.5)/W` hits the centre of column `j`. Taps that fall outside
//! the map read zero. The helpers here are shared with fused kernels built on
//! top of this crate so that every caller performs the same arithmetic.

use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

/// One of the four interpolation taps around a sample point.
#[derive(Clone, Copy, Debug)]
pub struct Tap<T> {
    /// Flat `y*W + x` index, `None` when outside the map.
    pub index: Option<usize>,
    pub weight: T,
    /// Derivative of `weight` w.r.t. the pixel x and y coordinates.
    pub dw_dx: T,
    pub dw_dy: T,
}

pub fn pixel_coord<T: Real>(u: T, size: usize) -> T {
    u * T::from_f64(size as f64) - T::from_f64(0.5)
}

/// Taps in the order (y0,x0), (y0,x1), (y1,x0), (y1,x1).
pub fn taps<T: Real>(px: T, py: T, h: usize, w: usize) -> [Tap<T>; 4] {
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    let (gx, gy) = (T::one() - fx, T::one() - fy);
    let at = |dy: i64, dx: i64| -> Option<usize> {
        let (xi, yi) = (x0.as_f64() as i64 + dx, y0.as_f64() as i64 + dy);
        (xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h).then(|| yi as usize * w + xi as usize)
    };
    if !px.is_finite() || !py.is_finite() {
        return [Tap { index: None, weight: T::zero(), dw_dx: T::zero(), dw_dy: T::zero() }; 4];
    }
    [
        Tap { index: at(0, 0), weight: gx * gy, dw_dx: -gy, dw_dy: -gx },
        Tap { index: at(0, 1), weight: fx * gy, dw_dx: gy, dw_dy: -fx },
        Tap { index: at(1, 0), weight: gx * fy, dw_dx: -fy, dw_dy: gx },
        Tap { index: at(1, 1), weight: fx * fy, dw_dx: fy, dw_dy: fx },
    ]
}

/// Interpolates a channels-last map `values[H*W, C]` (row stride `stride`)
/// and adds `scale * sample` into `out[C]`.
pub fn accumulate_sample<T: Real>(taps: &[Tap<T>; 4], values: &[T], stride: usize, scale: T, out: &mut [T]) {
    let c = out.len();
    for (k, o) in out.iter_mut().enumerate() {
        let mut s = T::zero();
        for t in taps {
            if let Some(i) = t.index {
                s += t.weight * values[i * stride + k];
            }
        }
        *o += scale * s;
    }
    debug_assert!(c <= stride);
}

impl<'t, T: Real> Var<'t, T> {
    /// Samples `self: [C,H,W]` at `points: [P,2]` holding normalised `(x, y)`;
    /// returns `[P,C]`.
    pub fn bilinear_sample(self, points: Var<'t, T>) -> Result<Var<'t, T>> {
        let (f, p) = (self.value(), points.value());
        if f.rank() != 3 || p.rank() != 2 || p.shape()[1] != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "bilinear_sample",
                lhs: f.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        let np = p.shape()[0];
        // channels-last copy so each tap reads a contiguous row
        let hw = h * w;
        let mut cl = vec![T::zero(); hw * c];
        for ch in 0..c {
            for i in 0..hw {
                cl[i * c + ch] = f.data()[ch * hw + i];
            }
        }
        let all_taps: Vec<[Tap<T>; 4]> = (0..np)
            .map(|i| {
                let (u, v) = (p.data()[2 * i], p.data()[2 * i + 1]);
                taps(pixel_coord(u, w), pixel_coord(v, h), h, w)
            })
            .collect();
        let mut out = vec![T::zero(); np * c];
        for (i, t) in all_taps.iter().enumerate() {
            accumulate_sample(t, &cl, c, T::one(), &mut out[i * c..(i + 1) * c]);
        }
        let (wf, hf) = (T::from_f64(w as f64), T::from_f64(h as f64));
        self.tape().push("bilinear_sample", &[self, points], Rc::new(Tensor::new([np, c], out)?), move |g| {
            let gd = g.data();
            let mut df = vec![T::zero(); c * hw];
            let mut dp = vec![T::zero(); np * 2];
            for (i, ts) in all_taps.iter().enumerate() {
                let gi = &gd[i * c..(i + 1) * c];
                for t in ts {
                    let Some(idx) = t.index else { continue };
                    let mut dot = T::zero();
                    for (ch, &gv) in gi.iter().enumerate() {
                        df[ch * hw + idx] += t.weight * gv;
                        dot += gv * cl[idx * c + ch];
                    }
                    dp[2 * i] += dot * t.dw_dx * wf;
                    dp[2 * i + 1] += dot * t.dw_dy * hf;
                }
            }
            vec![
                Some(Tensor::new([c, h, w], df).expect("sample df")),
                Some(Tensor::new([np, 2], dp).expect("sample dp")),
            ]
        })
    }
}
