use scb_tensor::{Real, Var};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, LayerNorm, ParamBuilder};

/// Channel-unifying pyramid fusion: per-level 1x1 adapt conv and norm, a top-down
/// nearest-upsample-and-add pathway, then a 3x3 smoothing conv per level.
#[derive(Clone, Debug)]
pub struct Fpn {
    pub adapt: Vec<(Conv2d, LayerNorm)>,
    pub smooth: Vec<Conv2d>,
    pub d_model: usize,
}

impl Fpn {
    pub fn new(pb: &mut ParamBuilder, in_channels: &[usize], d_model: usize) -> Self {
        let mut adapt = Vec::new();
        let mut smooth = Vec::new();
        for (i, &c) in in_channels.iter().enumerate() {
            let mut lp = pb.scope(format!("level{i}"));
            adapt.push((Conv2d::same(&mut lp.scope("adapt"), c, d_model, 1), LayerNorm::new(&mut lp.scope("adapt_norm"), d_model)));
            smooth.push(Conv2d::same(&mut lp.scope("smooth"), d_model, d_model, 3));
        }
        Fpn { adapt, smooth, d_model }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, levels: &[Var<'t, T>]) -> Result<Vec<Var<'t, T>>> {
        if levels.len() != self.adapt.len() {
            return Err(Error::Validation(format!(
                "fpn: expected {} pyramid levels, got {}",
                self.adapt.len(),
                levels.len()
            )));
        }
        let adapted = levels
            .iter()
            .zip(&self.adapt)
            .map(|(&x, (conv, norm))| norm.forward(ctx, conv.forward(ctx, x)?, 0))
            .collect::<Result<Vec<_>>>()?;
        let mut merged = adapted.clone();
        for i in (0..merged.len() - 1).rev() {
            let s = adapted[i].shape();
            let up = merged[i + 1].upsample_nearest2x(s[1], s[2])?;
            merged[i] = adapted[i].add(up)?;
        }
        merged.iter().zip(&self.smooth).map(|(&x, conv)| conv.forward(ctx, x)).collect()
    }
}
