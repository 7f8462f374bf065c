//! Multi-scale deformable attention.
//!
//! Each query attends to `K` sampled points per head and level, located at its
//! reference point plus a learned offset, and mixes them with softmax weights
//! normalised over all `L*K` samples of a head.

use scb_tensor::ops::sample::{accumulate_sample, pixel_coord, taps, Tap};
use scb_tensor::{Real, Tensor, TensorError, Var};

use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, Linear, ParamBuilder};

/// Spatial extent of one level inside a flattened token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelShape {
    pub h: usize,
    pub w: usize,
    pub start: usize,
}

pub fn level_shapes(shapes: &[(usize, usize)]) -> Vec<LevelShape> {
    let mut start = 0;
    shapes
        .iter()
        .map(|&(h, w)| {
            let l = LevelShape { h, w, start };
            start += h * w;
            l
        })
        .collect()
}

struct Sample<T> {
    taps: [Tap<T>; 4],
}

/// Fused sampling kernel.
///
/// * `value`: `[N, D]` tokens of all levels, channels split into `heads` groups
/// * `refs`: `[Q, L, 2]` normalised `(x, y)` reference points
/// * `offsets`: `[Q, M, L, K, 2]` in pixels of the sampled level
/// * `weights`: `[Q, M, L, K]` attention weights
///
/// Returns `[Q, D]`: per head, the weighted sum of bilinear samples.
pub fn ms_deform_attn_core<'t, T: Real>(
    value: Var<'t, T>,
    levels: &[LevelShape],
    refs: Var<'t, T>,
    offsets: Var<'t, T>,
    weights: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (v, r, o, a) = (value.value(), refs.value(), offsets.value(), weights.value());
    let (vs, os, ws) = (v.shape().to_vec(), o.shape().to_vec(), a.shape().to_vec());
    let n_tokens: usize = levels.iter().map(|l| l.h * l.w).sum();
    let bad = |what: &str| Error::Validation(format!("ms_deform_attn: {what} (value {vs:?}, offsets {os:?}, weights {ws:?})"));
    if vs.len() != 2 || vs[0] != n_tokens {
        return Err(bad("value must be [sum(h*w), D]"));
    }
    if os.len() != 5 || os[4] != 2 || ws.len() != 4 || os[..4] != ws[..] {
        return Err(bad("offsets must be [Q,M,L,K,2] and weights [Q,M,L,K]"));
    }
    let (q, m, l, k) = (ws[0], ws[1], ws[2], ws[3]);
    let d = vs[1];
    if l != levels.len() || d % m != 0 || r.shape() != [q, l, 2] {
        return Err(bad("inconsistent level, head or reference-point counts"));
    }
    let dh = d / m;
    let (vd, rd, od, ad) = (v.data(), r.data(), o.data(), a.data());

    let mut samples = Vec::with_capacity(q * m * l * k);
    let mut out = vec![T::zero(); q * d];
    for qi in 0..q {
        for mi in 0..m {
            let dst = &mut out[qi * d + mi * dh..qi * d + (mi + 1) * dh];
            for (li, lv) in levels.iter().enumerate() {
                let (wf, hf) = (T::from_f64(lv.w as f64), T::from_f64(lv.h as f64));
                let (rx, ry) = (rd[(qi * l + li) * 2], rd[(qi * l + li) * 2 + 1]);
                let src = &vd[lv.start * d + mi * dh..];
                for ki in 0..k {
                    let s = (((qi * m + mi) * l + li) * k + ki) * 2;
                    let (lx, ly) = (rx + od[s] / wf, ry + od[s + 1] / hf);
                    let t = taps(pixel_coord(lx, lv.w), pixel_coord(ly, lv.h), lv.h, lv.w);
                    accumulate_sample(&t, src, d, ad[s / 2], dst);
                    samples.push(Sample { taps: t });
                }
            }
        }
    }

    let levels = levels.to_vec();
    let (rshape, oshape, wshape) = (r.shape().to_vec(), os.clone(), ws.clone());
    let tape = value.tape();
    let out = Tensor::new([q, d], out).map_err(Error::from)?;
    let var = tape.custom_op("ms_deform_attn", &[value, refs, offsets, weights], out, move |g| {
        let (vd, od, ad, gd) = (v.data(), o.data(), a.data(), g.data());
        let mut dv = vec![T::zero(); vd.len()];
        let mut dr = vec![T::zero(); q * l * 2];
        let mut doff = vec![T::zero(); od.len()];
        let mut dw = vec![T::zero(); ad.len()];
        let mut idx = 0;
        for qi in 0..q {
            for mi in 0..m {
                let gq = &gd[qi * d + mi * dh..qi * d + (mi + 1) * dh];
                for (li, lv) in levels.iter().enumerate() {
                    let (wf, hf) = (T::from_f64(lv.w as f64), T::from_f64(lv.h as f64));
                    for _ in 0..k {
                        let s = idx * 2;
                        let attn = ad[idx];
                        let mut dattn = T::zero();
                        let (mut dpx, mut dpy) = (T::zero(), T::zero());
                        for t in &samples[idx].taps {
                            let Some(ti) = t.index else { continue };
                            let row = (lv.start + ti) * d + mi * dh;
                            let mut dot = T::zero();
                            for (c, &gv) in gq.iter().enumerate() {
                                dot += gv * vd[row + c];
                                dv[row + c] += attn * t.weight * gv;
                            }
                            dattn += t.weight * dot;
                            dpx += attn * dot * t.dw_dx;
                            dpy += attn * dot * t.dw_dy;
                        }
                        dw[idx] = dattn;
                        // pixel = (ref + off/W)*W - 0.5
                        doff[s] = dpx;
                        doff[s + 1] = dpy;
                        dr[(qi * l + li) * 2] += dpx * wf;
                        dr[(qi * l + li) * 2 + 1] += dpy * hf;
                        idx += 1;
                    }
                }
            }
        }
        vec![
            Some(Tensor::new(vec![vd.len() / d, d], dv).expect("deform dv")),
            Some(Tensor::new(rshape, dr).expect("deform dref")),
            Some(Tensor::new(oshape, doff).expect("deform doff")),
            Some(Tensor::new(wshape, dw).expect("deform dw")),
        ]
    });
    var.map_err(|e: TensorError| e.into())
}

/// Offset bias that spreads the `K` points of each head along a distinct direction,
/// at distances 1..=K pixels, identically on every level.
pub fn direction_grid(heads: usize, levels: usize, points: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(heads * levels * points * 2);
    for m in 0..heads {
        let theta = 2.0 * std::f64::consts::PI * m as f64 / heads as f64;
        let (c, s) = (theta.cos(), theta.sin());
        let norm = c.abs().max(s.abs());
        for _ in 0..levels {
            for k in 0..points {
                out.push((c / norm * (k + 1) as f64) as f32);
                out.push((s / norm * (k + 1) as f64) as f32);
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct DeformAttn {
    pub value_proj: Linear,
    pub offsets: Linear,
    pub weights: Linear,
    pub out_proj: Linear,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

impl DeformAttn {
    pub fn new(pb: &mut ParamBuilder, d: usize, heads: usize, levels: usize, points: usize) -> Self {
        let n = heads * levels * points;
        DeformAttn {
            value_proj: Linear::new(&mut pb.scope("value_proj"), d, d),
            offsets: Linear::with_init(
                &mut pb.scope("sampling_offsets"),
                d,
                2 * n,
                Init::Zeros,
                Init::Values(direction_grid(heads, levels, points)),
            ),
            weights: Linear::with_init(&mut pb.scope("attention_weights"), d, n, Init::Zeros, Init::Zeros),
            out_proj: Linear::new(&mut pb.scope("output_proj"), d, d),
            heads,
            levels,
            points,
        }
    }

    /// Softmax-normalised weights `[Q, M, L, K]` for queries `[Q, D]`.
    pub fn attention_weights<'t, T: Real>(&self, ctx: &Ctx<'t, T>, query: Var<'t, T>) -> Result<Var<'t, T>> {
        let q = query.shape()[0];
        let (m, l, k) = (self.heads, self.levels, self.points);
        let w = self.weights.forward(ctx, query)?.reshape([q, m, l * k])?.softmax(-1)?;
        Ok(w.reshape([q, m, l, k])?)
    }

    /// `query: [Q,D]` (positional encoding already added), `refs: [Q,L,2]`, `input: [N,D]`.
    pub fn forward<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, T>,
        query: Var<'t, T>,
        refs: Var<'t, T>,
        input: Var<'t, T>,
        levels: &[LevelShape],
    ) -> Result<Var<'t, T>> {
        let q = query.shape()[0];
        let (m, l, k) = (self.heads, self.levels, self.points);
        let value = self.value_proj.forward(ctx, input)?;
        let offsets = self.offsets.forward(ctx, query)?.reshape([q, m, l, k, 2])?;
        let weights = self.attention_weights(ctx, query)?;
        let sampled = ms_deform_attn_core(value, levels, refs, offsets, weights)?;
        self.out_proj.forward(ctx, sampled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_directions_differ_per_head() {
        let g = direction_grid(4, 1, 2);
        // head 0 points along +x, head 1 along +y
        assert_eq!(&g[0..4], &[1.0, 0.0, 2.0, 0.0]);
        assert!((g[4]).abs() < 1e-6 && (g[5] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn level_starts_accumulate() {
        let ls = level_shapes(&[(4, 4), (2, 2), (1, 1)]);
        assert_eq!(ls.iter().map(|l| l.start).collect::<Vec<_>>(), vec![0, 16, 20]);
    }
}
