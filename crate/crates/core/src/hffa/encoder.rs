use scb_tensor::{Real, Tensor, Var};

use super::deform::{DeformAttn, LevelShape};
use crate::error::Result;
use crate::nn::{Ctx, Ffn, LayerNorm, ParamBuilder};

/// Deformable self-attention, add & norm, FFN, add & norm.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: DeformAttn,
    pub norm1: LayerNorm,
    pub ffn: Ffn,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(pb: &mut ParamBuilder, d: usize, heads: usize, levels: usize, points: usize) -> Self {
        EncoderLayer {
            attn: DeformAttn::new(&mut pb.scope("self_attn"), d, heads, levels, points),
            norm1: LayerNorm::new(&mut pb.scope("norm1"), d),
            ffn: Ffn::new(&mut pb.scope("ffn"), d, 4 * d),
            norm2: LayerNorm::new(&mut pb.scope("norm2"), d),
        }
    }

    pub fn forward<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, T>,
        src: Var<'t, T>,
        pos: Var<'t, T>,
        refs: Var<'t, T>,
        levels: &[LevelShape],
    ) -> Result<Var<'t, T>> {
        let attended = self.attn.forward(ctx, src.add(pos)?, refs, src, levels)?;
        let x = self.norm1.forward(ctx, src.add(attended)?, -1)?;
        let y = self.ffn.forward(ctx, x)?;
        self.norm2.forward(ctx, x.add(y)?, -1)
    }
}

/// Cell-centre reference point of every token, repeated for each of `n_levels` levels:
/// `[sum(h*w), n_levels, 2]`.
pub fn encoder_reference_points<T: Real>(levels: &[LevelShape], n_levels: usize) -> Tensor<T> {
    let n: usize = levels.iter().map(|l| l.h * l.w).sum();
    let mut out = Vec::with_capacity(n * n_levels * 2);
    for lv in levels {
        for y in 0..lv.h {
            for x in 0..lv.w {
                let rx = T::from_f64((x as f64 + 0.5) / lv.w as f64);
                let ry = T::from_f64((y as f64 + 0.5) / lv.h as f64);
                for _ in 0..n_levels {
                    out.push(rx);
                    out.push(ry);
                }
            }
        }
    }
    Tensor::new([n, n_levels, 2], out).expect("reference points")
}
