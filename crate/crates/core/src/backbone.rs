//! LKNeXt: a ConvNeXt-style four-stage backbone whose stages end in large selective-kernel blocks.

use scb_tensor::{Conv2dOptions, Real, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, LayerNorm, ParamBuilder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub base_channels: usize,
    pub depths: [usize; 4],
    /// When false every block is a ConvNeXt block (LSK ablation).
    pub use_lsk: bool,
    pub drop_path: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { base_channels: 32, depths: [2, 2, 4, 2], use_lsk: true, drop_path: 0.0 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return Err(Error::Validation(format!(
                "backbone.base_channels must be a positive even number, got {}",
                self.base_channels
            )));
        }
        if self.depths.contains(&0) {
            return Err(Error::Validation(format!("backbone.depths must all be >= 1, got {:?}", self.depths)));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::Validation(format!("backbone.drop_path must be in [0,1), got {}", self.drop_path)));
        }
        Ok(())
    }

    pub fn channels(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.base_channels << i)
    }

    pub fn is_lsk(&self, stage: usize, block: usize) -> bool {
        self.use_lsk && block + 1 == self.depths[stage]
    }

    /// Closed-form parameter count; see the README for the derivation.
    pub fn param_count(&self) -> usize {
        let c = self.base_channels;
        let mut n = 51 * c;
        for (s, &depth) in self.depths.iter().enumerate() {
            let cs = c << s;
            for b in 0..depth {
                n += if self.is_lsk(s, b) { lsk_params(cs) } else { convnext_params(cs) };
            }
            if s < 3 {
                n += 8 * cs * cs + 4 * cs;
            }
        }
        n
    }
}

pub fn convnext_params(c: usize) -> usize {
    8 * c * c + 57 * c
}

pub fn lsk_params(c: usize) -> usize {
    3 * c * c / 2 + 78 * c + 198
}

/// Inverted bottleneck: depthwise 7x7, norm, 1x1 to 4C, GELU, 1x1 back to C, residual.
#[derive(Clone, Debug)]
pub struct ConvNeXtBlock {
    pub dwconv: Conv2d,
    pub norm: LayerNorm,
    pub pwconv1: Conv2d,
    pub pwconv2: Conv2d,
    pub channels: usize,
    pub drop_path: f64,
}

impl ConvNeXtBlock {
    pub fn new(pb: &mut ParamBuilder, c: usize, drop_path: f64) -> Self {
        ConvNeXtBlock {
            dwconv: Conv2d::depthwise(&mut pb.scope("dwconv"), c, 7, 1),
            norm: LayerNorm::new(&mut pb.scope("norm"), c),
            pwconv1: Conv2d::same(&mut pb.scope("pwconv1"), c, 4 * c, 1),
            pwconv2: Conv2d::same(&mut pb.scope("pwconv2"), 4 * c, c, 1),
            channels: c,
            drop_path,
        }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        check_channels("convnext block", &x, self.channels)?;
        let h = self.dwconv.forward(ctx, x)?;
        let h = self.norm.forward(ctx, h, 0)?;
        let h = self.pwconv1.forward(ctx, h)?.gelu()?;
        let h = self.pwconv2.forward(ctx, h)?;
        Ok(x.add(drop_path(ctx, h, self.drop_path)?)?)
    }
}

/// Large selective-kernel block: two cascaded depthwise branches gated by a spatial
/// selection map, applied as `x + x * A`.
#[derive(Clone, Debug)]
pub struct LskBlock {
    pub dw5: Conv2d,
    pub dw7_dilated: Conv2d,
    pub squeeze1: Conv2d,
    pub squeeze2: Conv2d,
    pub fuse: Conv2d,
    pub restore: Conv2d,
    pub channels: usize,
}

impl LskBlock {
    pub fn new(pb: &mut ParamBuilder, c: usize) -> Self {
        LskBlock {
            dw5: Conv2d::depthwise(&mut pb.scope("dw5"), c, 5, 1),
            dw7_dilated: Conv2d::depthwise(&mut pb.scope("dw7"), c, 7, 3),
            squeeze1: Conv2d::same(&mut pb.scope("squeeze1"), c, c / 2, 1),
            squeeze2: Conv2d::same(&mut pb.scope("squeeze2"), c, c / 2, 1),
            fuse: Conv2d::same(&mut pb.scope("fuse"), 2, 2, 7),
            restore: Conv2d::same(&mut pb.scope("restore"), c / 2, c, 1),
            channels: c,
        }
    }

    /// Returns the block output and the two selection maps.
    pub fn forward_with_gates<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        check_channels("lsk block", &x, self.channels)?;
        let u1 = self.dw5.forward(ctx, x)?;
        let u2 = self.dw7_dilated.forward(ctx, u1)?;
        let v1 = self.squeeze1.forward(ctx, u1)?;
        let v2 = self.squeeze2.forward(ctx, u2)?;
        let v = Var::concat(&[v1, v2], 0)?;
        let pooled = Var::concat(&[v.mean(&[0], true)?, v.max(&[0], true)?], 0)?;
        let gates = self.fuse.forward(ctx, pooled)?.sigmoid()?;
        let g = gates.split(0, &[1, 1])?;
        let s = v1.mul(g[0])?.add(v2.mul(g[1])?)?;
        let a = self.restore.forward(ctx, s)?;
        Ok((x.add(x.mul(a)?)?, gates))
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.forward_with_gates(ctx, x)?.0)
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    ConvNeXt(ConvNeXtBlock),
    Lsk(LskBlock),
}

impl Block {
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            Block::ConvNeXt(b) => b.forward(ctx, x),
            Block::Lsk(b) => b.forward(ctx, x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Downsample {
    pub norm: LayerNorm,
    pub conv: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub stem: Conv2d,
    pub stem_norm: LayerNorm,
    pub stages: Vec<Vec<Block>>,
    pub downsamples: Vec<Downsample>,
}

impl Backbone {
    pub fn new(pb: &mut ParamBuilder, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.channels();
        let stem = Conv2d::new(&mut pb.scope("stem"), 3, ch[0], 4, Conv2dOptions::default().stride(4));
        let stem_norm = LayerNorm::new(&mut pb.scope("stem_norm"), ch[0]);
        let mut stages = Vec::new();
        let mut downsamples = Vec::new();
        for (s, &depth) in cfg.depths.iter().enumerate() {
            let mut sp = pb.scope(format!("stage{s}"));
            let blocks = (0..depth)
                .map(|b| {
                    let mut bp = sp.scope(format!("block{b}"));
                    if cfg.is_lsk(s, b) {
                        Block::Lsk(LskBlock::new(&mut bp, ch[s]))
                    } else {
                        Block::ConvNeXt(ConvNeXtBlock::new(&mut bp, ch[s], cfg.drop_path))
                    }
                })
                .collect();
            stages.push(blocks);
            if s < 3 {
                let mut dp = pb.scope(format!("downsample{s}"));
                downsamples.push(Downsample {
                    norm: LayerNorm::new(&mut dp.scope("norm"), ch[s]),
                    conv: Conv2d::new(&mut dp.scope("conv"), ch[s], ch[s + 1], 2, Conv2dOptions::default().stride(2)),
                });
            }
        }
        Ok(Backbone { cfg: cfg.clone(), stem, stem_norm, stages, downsamples })
    }

    /// Image `[3,H,W]` to four maps at strides 4, 8, 16, 32.
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, image: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Validation(format!("backbone expects an image [3,H,W], got {shape:?}")));
        }
        if shape[1] % 32 != 0 || shape[2] % 32 != 0 || shape[1] == 0 || shape[2] == 0 {
            return Err(Error::Validation(format!(
                "backbone input {}x{} must have height and width divisible by 32",
                shape[1], shape[2]
            )));
        }
        let mut x = self.stem.forward(ctx, image)?;
        x = self.stem_norm.forward(ctx, x, 0)?;
        let mut levels = Vec::with_capacity(4);
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                let d = &self.downsamples[s - 1];
                x = d.conv.forward(ctx, d.norm.forward(ctx, x, 0)?)?;
            }
            for b in blocks {
                x = b.forward(ctx, x)?;
            }
            levels.push(x);
        }
        Ok(levels)
    }
}

fn check_channels<T: Real>(op: &str, x: &Var<'_, T>, c: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 3 || s[0] != c {
        return Err(Error::Validation(format!("{op}: expected [{c},H,W] input, got {s:?}")));
    }
    Ok(())
}

/// Stochastic depth on one sample: drop the branch with probability `p`, else rescale.
fn drop_path<'t, T: Real>(ctx: &Ctx<'t, T>, branch: Var<'t, T>, p: f64) -> Result<Var<'t, T>> {
    if !ctx.training || p == 0.0 {
        return Ok(branch);
    }
    let keep = if ctx.bernoulli(p) { 0.0 } else { 1.0 / (1.0 - p) };
    Ok(branch.mul_scalar(T::from_f64(keep))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{zero_param, ParamStore};
    use scb_tensor::{RngState, Tape, Tensor};

    fn build<B>(f: impl FnOnce(&mut ParamBuilder) -> B, seed: u64) -> (ParamStore, B) {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(seed);
        let b = f(&mut ParamBuilder::new(&mut store, &mut rng));
        (store, b)
    }

    #[test]
    fn block_param_counts_match_formulas() {
        for c in [8, 16, 32] {
            let (s, _) = build(|pb| ConvNeXtBlock::new(pb, c, 0.0), 0);
            assert_eq!(s.numel(), convnext_params(c));
            let (s, _) = build(|pb| LskBlock::new(pb, c), 0);
            assert_eq!(s.numel(), lsk_params(c));
        }
    }

    #[test]
    fn backbone_param_count_matches_registry() {
        for use_lsk in [true, false] {
            let cfg = BackboneConfig { base_channels: 8, use_lsk, ..Default::default() };
            let (s, _) = build(|pb| Backbone::new(pb, &cfg).unwrap(), 0);
            assert_eq!(s.numel(), cfg.param_count());
        }
    }

    #[test]
    fn zeroed_convnext_block_is_identity() {
        let (mut store, b) = build(|pb| ConvNeXtBlock::new(pb, 4, 0.0), 1);
        for id in [b.dwconv.weight, b.dwconv.bias.unwrap(), b.pwconv1.weight, b.pwconv1.bias.unwrap()] {
            zero_param(&mut store, id);
        }
        zero_param(&mut store, b.pwconv2.weight);
        zero_param(&mut store, b.pwconv2.bias.unwrap());
        let tape = Tape::<f32>::new();
        let ctx = Ctx::bind(&tape, &store, false);
        let x = Tensor::from_fn([4, 5, 5], |i| (i as f32 * 0.37).sin());
        let y = b.forward(&ctx, tape.constant(x.clone())).unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn zeroed_restore_makes_lsk_identity() {
        let (mut store, b) = build(|pb| LskBlock::new(pb, 6), 2);
        zero_param(&mut store, b.restore.weight);
        zero_param(&mut store, b.restore.bias.unwrap());
        let tape = Tape::<f32>::new();
        let ctx = Ctx::bind(&tape, &store, false);
        let x = Tensor::from_fn([6, 7, 7], |i| (i as f32 * 0.11).cos() * 3.0);
        let (y, gates) = b.forward_with_gates(&ctx, tape.constant(x.clone())).unwrap();
        assert_eq!(*y.value(), x);
        assert!(gates.value().data().iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn indivisible_input_names_the_multiple() {
        let (store, bb) = build(|pb| Backbone::new(pb, &BackboneConfig { base_channels: 4, ..Default::default() }).unwrap(), 0);
        let tape = Tape::<f32>::new();
        let ctx = Ctx::bind(&tape, &store, false);
        let err = bb.forward(&ctx, tape.constant(Tensor::zeros([3, 48, 64]))).unwrap_err().to_string();
        assert!(err.contains("divisible by 32"), "{err}");
    }
}
