use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::real::{gemm, MatView, Real};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Conv2dOptions { stride: 1, padding: 0, dilation: 1, groups: 1 }
    }
}

impl Conv2dOptions {
    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    opts: Conv2dOptions,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.opts.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.opts.groups
    }

    fn is_depthwise(&self) -> bool {
        self.opts.groups == self.cin && self.cout == self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.opts.stride == 1 && self.opts.padding == 0
    }

    /// Range of output columns whose input column `ox*s + off - p` is inside `0..w`.
    fn valid_cols(&self, off: usize) -> (usize, usize) {
        valid_range(self.w, self.wo, self.opts.stride, off, self.opts.padding)
    }

    fn valid_rows(&self, off: usize) -> (usize, usize) {
        valid_range(self.h, self.ho, self.opts.stride, off, self.opts.padding)
    }
}

fn valid_range(len: usize, out_len: usize, stride: usize, off: usize, pad: usize) -> (usize, usize) {
    // smallest o with o*stride + off >= pad
    let lo = if off >= pad { 0 } else { (pad - off).div_ceil(stride) };
    // largest o with o*stride + off - pad < len
    let hi = if off >= pad + len { 0 } else { ((len + pad - off - 1) / stride + 1).min(out_len) };
    (lo.min(hi), hi)
}

fn geometry(x: &[usize], w: &[usize], opts: Conv2dOptions) -> Result<Geometry> {
    let (batch, xs) = match x.len() {
        3 => (1, x),
        4 => (x[0], &x[1..]),
        _ => {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: x.to_vec(),
                reason: "input must be [C,H,W] or [N,C,H,W]".into(),
            })
        }
    };
    if w.len() != 4 {
        return Err(TensorError::InvalidShape { op: "conv2d", shape: w.to_vec(), reason: "weight must be rank 4".into() });
    }
    let (cin, h, wd) = (xs[0], xs[1], xs[2]);
    let (cout, cin_g, kh, kw) = (w[0], w[1], w[2], w[3]);
    let g = opts.groups;
    if g == 0 || opts.stride == 0 || opts.dilation == 0 {
        return Err(TensorError::InvalidArgument { op: "conv2d", reason: "stride, dilation and groups must be >= 1".into() });
    }
    if cin % g != 0 || cout % g != 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            reason: format!("channels in={cin} out={cout} not divisible by groups={g}"),
        });
    }
    if cin / g != cin_g {
        return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: x.to_vec(), rhs: w.to_vec() });
    }
    let span_h = opts.dilation * (kh - 1) + 1;
    let span_w = opts.dilation * (kw - 1) + 1;
    if h + 2 * opts.padding < span_h || wd + 2 * opts.padding < span_w {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            reason: format!("empty output: input {h}x{wd} with padding {} smaller than kernel span {span_h}x{span_w}", opts.padding),
        });
    }
    let ho = (h + 2 * opts.padding - span_h) / opts.stride + 1;
    let wo = (wd + 2 * opts.padding - span_w) / opts.stride + 1;
    Ok(Geometry { batch, cin, h, w: wd, cout, kh, kw, ho, wo, opts })
}

/// Unfolds one group of one image into `[cin_g*kh*kw, ho*wo]`.
fn im2col<T: Real>(g: &Geometry, x: &[T], col: &mut [T]) {
    let (s, d) = (g.opts.stride, g.opts.dilation);
    let hw = g.ho * g.wo;
    col.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..g.cin_g() {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid_rows(ky * d);
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let (ox0, ox1) = g.valid_cols(kx * d);
                for oy in oy0..oy1 {
                    let iy = oy * s + ky * d - g.opts.padding;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    for ox in ox0..ox1 {
                        dst[oy * g.wo + ox] = src[ox * s + kx * d - g.opts.padding];
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &Geometry, col: &[T], dx: &mut [T]) {
    let (s, d) = (g.opts.stride, g.opts.dilation);
    let hw = g.ho * g.wo;
    for c in 0..g.cin_g() {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid_rows(ky * d);
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let (ox0, ox1) = g.valid_cols(kx * d);
                for oy in oy0..oy1 {
                    let iy = oy * s + ky * d - g.opts.padding;
                    for ox in ox0..ox1 {
                        plane[iy * g.w + ox * s + kx * d - g.opts.padding] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

/// Visits every (kernel tap, output row) pair of one depthwise plane with the
/// matching contiguous/strided column spans.
fn depthwise_taps(g: &Geometry, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
    let (s, d, p) = (g.opts.stride, g.opts.dilation, g.opts.padding);
    for ky in 0..g.kh {
        let (oy0, oy1) = g.valid_rows(ky * d);
        for kx in 0..g.kw {
            let (ox0, ox1) = g.valid_cols(kx * d);
            if ox0 >= ox1 {
                continue;
            }
            for oy in oy0..oy1 {
                let iy = oy * s + ky * d - p;
                let ix0 = ox0 * s + kx * d - p;
                f(ky * g.kw + kx, oy, iy, ox0, ox1, ix0);
            }
        }
    }
}

fn conv_forward<T: Real>(g: &Geometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let hw = g.ho * g.wo;
    let mut out = vec![T::zero(); g.batch * g.cout * hw];
    let in_img = g.cin * g.h * g.w;
    let out_img = g.cout * hw;
    if g.is_depthwise() {
        let k2 = g.kh * g.kw;
        let s = g.opts.stride;
        for n in 0..g.batch {
            for c in 0..g.cin {
                let plane = &x[n * in_img + c * g.h * g.w..][..g.h * g.w];
                let o = &mut out[n * out_img + c * hw..][..hw];
                let wk = &w[c * k2..(c + 1) * k2];
                depthwise_taps(g, |t, oy, iy, ox0, ox1, ix0| {
                    let wv = wk[t];
                    let dst = &mut o[oy * g.wo + ox0..oy * g.wo + ox1];
                    let src = &plane[iy * g.w..];
                    if s == 1 {
                        for (dv, &sv) in dst.iter_mut().zip(&src[ix0..ix0 + (ox1 - ox0)]) {
                            *dv += wv * sv;
                        }
                    } else {
                        for (j, dv) in dst.iter_mut().enumerate() {
                            *dv += wv * src[ix0 + j * s];
                        }
                    }
                });
            }
        }
    } else {
        let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
        let kk = cin_g * g.kh * g.kw;
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * hw] };
        for n in 0..g.batch {
            for grp in 0..g.opts.groups {
                let xg = &x[n * in_img + grp * cin_g * g.h * g.w..][..cin_g * g.h * g.w];
                let colv: &[T] = if g.is_pointwise() {
                    xg
                } else {
                    im2col(g, xg, &mut col);
                    &col
                };
                let wg = &w[grp * cout_g * kk..(grp + 1) * cout_g * kk];
                let og = &mut out[n * out_img + grp * cout_g * hw..][..cout_g * hw];
                gemm(MatView::row_major(wg, cout_g, kk), MatView::row_major(colv, kk, hw), og, false);
            }
        }
    }
    if let Some(b) = bias {
        for n in 0..g.batch {
            for (c, &bv) in b.iter().enumerate() {
                out[n * out_img + c * hw..][..hw].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

fn conv_backward<T: Real>(g: &Geometry, x: &[T], w: &[T], gy: &[T]) -> (Vec<T>, Vec<T>) {
    let hw = g.ho * g.wo;
    let in_img = g.cin * g.h * g.w;
    let out_img = g.cout * hw;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    if g.is_depthwise() {
        let k2 = g.kh * g.kw;
        let s = g.opts.stride;
        for n in 0..g.batch {
            for c in 0..g.cin {
                let plane = &x[n * in_img + c * g.h * g.w..][..g.h * g.w];
                let dplane = &mut dx[n * in_img + c * g.h * g.w..][..g.h * g.w];
                let go = &gy[n * out_img + c * hw..][..hw];
                let wk = &w[c * k2..(c + 1) * k2];
                let dwk = &mut dw[c * k2..(c + 1) * k2];
                depthwise_taps(g, |t, oy, iy, ox0, ox1, ix0| {
                    let wv = wk[t];
                    let grow = &go[oy * g.wo + ox0..oy * g.wo + ox1];
                    let mut acc = T::zero();
                    if s == 1 {
                        let xs = &plane[iy * g.w + ix0..iy * g.w + ix0 + (ox1 - ox0)];
                        for (&gv, &xv) in grow.iter().zip(xs) {
                            acc += gv * xv;
                        }
                        let ds = &mut dplane[iy * g.w + ix0..iy * g.w + ix0 + (ox1 - ox0)];
                        for (dv, &gv) in ds.iter_mut().zip(grow) {
                            *dv += wv * gv;
                        }
                    } else {
                        for (j, &gv) in grow.iter().enumerate() {
                            let ix = iy * g.w + ix0 + j * s;
                            acc += gv * plane[ix];
                            dplane[ix] += wv * gv;
                        }
                    }
                    dwk[t] += acc;
                });
            }
        }
    } else {
        let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
        let kk = cin_g * g.kh * g.kw;
        let pointwise = g.is_pointwise();
        let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kk * hw] };
        let mut dcol = vec![T::zero(); kk * hw];
        for n in 0..g.batch {
            for grp in 0..g.opts.groups {
                let xoff = n * in_img + grp * cin_g * g.h * g.w;
                let xg = &x[xoff..xoff + cin_g * g.h * g.w];
                let colv: &[T] = if pointwise {
                    xg
                } else {
                    im2col(g, xg, &mut col);
                    &col
                };
                let gg = &gy[n * out_img + grp * cout_g * hw..][..cout_g * hw];
                let wg = &w[grp * cout_g * kk..(grp + 1) * cout_g * kk];
                // dW_g += dY_g * col^T
                gemm(
                    MatView::row_major(gg, cout_g, hw),
                    MatView::transposed(colv, hw, kk),
                    &mut dw[grp * cout_g * kk..(grp + 1) * cout_g * kk],
                    true,
                );
                // dcol = W_g^T * dY_g
                let dxg = &mut dx[xoff..xoff + cin_g * g.h * g.w];
                if pointwise {
                    gemm(MatView::transposed(wg, kk, cout_g), MatView::row_major(gg, cout_g, hw), dxg, true);
                } else {
                    gemm(MatView::transposed(wg, kk, cout_g), MatView::row_major(gg, cout_g, hw), &mut dcol, false);
                    col2im(g, &dcol, dxg);
                }
            }
        }
    }
    (dx, dw)
}

impl<'t, T: Real> Var<'t, T> {
    /// 2-D cross-correlation with zero padding.
    ///
    /// `self` is `[C,H,W]` or `[N,C,H,W]`, `weight` is `[Cout, C/groups, kh, kw]`.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, opts: Conv2dOptions) -> Result<Var<'t, T>> {
        let (x, w) = (self.value(), weight.value());
        let g = geometry(x.shape(), w.shape(), opts)?;
        let b = bias.map(|b| b.value());
        if let Some(b) = &b {
            if b.shape() != [g.cout] {
                return Err(TensorError::ShapeMismatch { op: "conv2d bias", lhs: vec![g.cout], rhs: b.shape().to_vec() });
            }
        }
        let out = conv_forward(&g, x.data(), w.data(), b.as_ref().map(|b| b.data()));
        let out_shape = if x.rank() == 3 { vec![g.cout, g.ho, g.wo] } else { vec![g.batch, g.cout, g.ho, g.wo] };
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        self.tape().push("conv2d", &inputs, Rc::new(Tensor::new(out_shape, out)?), move |gy| {
            let (dx, dw) = conv_backward(&g, x.data(), w.data(), gy.data());
            let mut grads = vec![
                Some(Tensor::new(x.shape().to_vec(), dx).expect("conv dx")),
                Some(Tensor::new(w.shape().to_vec(), dw).expect("conv dw")),
            ];
            if has_bias {
                let hw = g.ho * g.wo;
                let mut db = vec![T::zero(); g.cout];
                for n in 0..g.batch {
                    for (c, d) in db.iter_mut().enumerate() {
                        *d += gy.data()[(n * g.cout + c) * hw..][..hw].iter().copied().sum::<T>();
                    }
                }
                grads.push(Some(Tensor::new(vec![g.cout], db).expect("conv db")));
            }
            grads
        })
    }

    /// Nearest-neighbour 2x upsampling of `[C,h,w]` cropped to `[C,out_h,out_w]`;
    /// requires `h == ceil(out_h/2)` and `w == ceil(out_w/2)`.
    pub fn upsample_nearest2x(self, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() != 3 || shape[1] != out_h.div_ceil(2) || shape[2] != out_w.div_ceil(2) {
            return Err(TensorError::InvalidArgument {
                op: "upsample_nearest2x",
                reason: format!("cannot upsample {shape:?} to {out_h}x{out_w}"),
            });
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            for y in 0..out_h {
                let row = &x.data()[(ch * h + y / 2) * w..][..w];
                out.extend((0..out_w).map(|xx| row[xx / 2]));
            }
        }
        self.tape().push("upsample_nearest2x", &[self], Rc::new(Tensor::new([c, out_h, out_w], out)?), move |g| {
            let mut dx = vec![T::zero(); c * h * w];
            for ch in 0..c {
                for y in 0..out_h {
                    for xx in 0..out_w {
                        dx[(ch * h + y / 2) * w + xx / 2] += g.data()[(ch * out_h + y) * out_w + xx];
                    }
                }
            }
            vec![Some(Tensor::new(shape, dx).expect("upsample grad"))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    /// Direct seven-loop reference convolution.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, o: Conv2dOptions) -> Tensor<f64> {
        let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, cig, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let ho = (h + 2 * o.padding - o.dilation * (kh - 1) - 1) / o.stride + 1;
        let wo = (wd + 2 * o.padding - o.dilation * (kw - 1) - 1) / o.stride + 1;
        let cog = co / o.groups;
        let mut out = Tensor::zeros([co, ho, wo]);
        for oc in 0..co {
            let grp = oc / cog;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..cig {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * o.stride + ky * o.dilation) as isize - o.padding as isize;
                                let ix = (ox * o.stride + kx * o.dilation) as isize - o.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.get(&[oc, ic, ky, kx]) * x.get(&[grp * cig + ic, iy as usize, ix as usize]);
                            }
                        }
                    }
                    out.data_mut()[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        let _ = c;
        out
    }

    fn check(cin: usize, cout: usize, k: usize, hw: usize, o: Conv2dOptions) {
        let x = Tensor::<f64>::from_fn([cin, hw, hw + 1], |i| ((i * 7 % 13) as f64 - 6.0) / 5.0);
        let w = Tensor::<f64>::from_fn([cout, cin / o.groups, k, k], |i| ((i * 5 % 11) as f64 - 5.0) / 7.0);
        let tape = Tape::<f64>::new();
        let y = tape.constant(x.clone()).conv2d(tape.constant(w.clone()), None, o).unwrap();
        let want = naive(&x, &w, o);
        assert_eq!(y.shape(), want.shape());
        assert!(y.value().max_abs_diff(&want).unwrap() < 1e-12, "{o:?}");
    }

    #[test]
    fn matches_naive_reference() {
        let base = Conv2dOptions::default();
        check(3, 4, 3, 6, base.padding(1));
        check(2, 4, 3, 7, base.stride(2).padding(1));
        check(4, 4, 5, 8, base.groups(4).padding(2));
        check(4, 4, 7, 9, base.groups(4).padding(9).dilation(3));
        check(4, 6, 3, 6, base.groups(2).padding(1).stride(2));
        check(4, 4, 3, 6, base.groups(4).stride(2));
        check(3, 5, 1, 5, base);
        check(3, 4, 4, 8, base.stride(4));
    }

    #[test]
    fn all_ones_gives_nine() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones([1, 3, 3]));
        let w = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let y = x.conv2d(w, None, Conv2dOptions::default()).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn depthwise_identity_kernel_is_exact() {
        let tape = Tape::<f32>::new();
        let xv = Tensor::from_fn([3, 4, 5], |i| (i as f32).sin());
        let x = tape.constant(xv.clone());
        let w = tape.constant(Tensor::ones([3, 1, 1, 1]));
        let y = x.conv2d(w, None, Conv2dOptions::default().groups(3)).unwrap();
        assert_eq!(*y.value(), xv);
    }

    #[test]
    fn batched_input_keeps_batch_axis() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones([2, 3, 4, 4]));
        let w = tape.constant(Tensor::ones([5, 3, 1, 1]));
        let y = x.conv2d(w, None, Conv2dOptions::default()).unwrap();
        assert_eq!(y.shape(), vec![2, 5, 4, 4]);
    }

    #[test]
    fn configuration_errors() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones([3, 4, 4]));
        let w = tape.constant(Tensor::ones([4, 1, 3, 3]));
        assert!(x.conv2d(w, None, Conv2dOptions::default().groups(2)).is_err());
        let big = tape.constant(Tensor::ones([1, 3, 7, 7]));
        assert!(x.conv2d(big, None, Conv2dOptions::default()).is_err());
    }

    #[test]
    fn upsample_then_crop() {
        let tape = Tape::<f32>::new();
        let x = tape.param(Tensor::new([1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        let y = x.upsample_nearest2x(3, 4).unwrap();
        assert_eq!(y.value().data(), &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4.]);
        let mut g = tape.backward(y.sum_all().unwrap()).unwrap();
        assert_eq!(g.take(x).data(), &[4., 4., 2., 2.]);
    }
}
