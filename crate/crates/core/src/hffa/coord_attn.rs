use scb_tensor::{Real, Var};

use crate::error::Result;
use crate::nn::{Conv2d, Ctx, ParamBuilder};

/// Coordinate attention: direction-aware pooling along each spatial axis, a shared
/// bottleneck, and per-axis sigmoid gates multiplied back onto the input.
#[derive(Clone, Debug)]
pub struct CoordAttention {
    pub reduce: Conv2d,
    pub gate_h: Conv2d,
    pub gate_w: Conv2d,
    pub mip: usize,
}

pub fn bottleneck_width(d: usize, reduction: usize) -> usize {
    (d / reduction.max(1)).max(8)
}

/// Parameters in one coordinate-attention unit.
pub fn coord_attention_params(d: usize, reduction: usize) -> usize {
    let mip = bottleneck_width(d, reduction);
    d * mip + mip + 2 * (mip * d + d)
}

impl CoordAttention {
    pub fn new(pb: &mut ParamBuilder, d: usize, reduction: usize) -> Self {
        let mip = bottleneck_width(d, reduction);
        CoordAttention {
            reduce: Conv2d::same(&mut pb.scope("reduce"), d, mip, 1),
            gate_h: Conv2d::same(&mut pb.scope("gate_h"), mip, d, 1),
            gate_w: Conv2d::same(&mut pb.scope("gate_w"), mip, d, 1),
            mip,
        }
    }

    /// Returns the output together with the gates `g_h: [D,H,1]` and `g_w: [D,1,W]`.
    pub fn forward_with_gates<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, T>,
        x: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
        let s = x.shape();
        let (h, w) = (s[1], s[2]);
        let z_h = x.mean(&[2], true)?;
        let z_w = x.mean(&[1], true)?.permute(&[0, 2, 1])?;
        let f = self.reduce.forward(ctx, Var::concat(&[z_h, z_w], 1)?)?.gelu()?;
        let parts = f.split(1, &[h, w])?;
        let g_h = self.gate_h.forward(ctx, parts[0])?.sigmoid()?;
        let g_w = self.gate_w.forward(ctx, parts[1])?.sigmoid()?.permute(&[0, 2, 1])?;
        let y = x.mul(g_h)?.mul(g_w)?;
        Ok((y, g_h, g_w))
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.forward_with_gates(ctx, x)?.0)
    }
}
