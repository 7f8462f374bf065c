//! Hybrid feature fusion: pyramid fusion, coordinate attention and a deformable encoder.

mod coord_attn;
mod deform;
mod encoder;
mod fpn;
mod posenc;

pub use coord_attn::{bottleneck_width, coord_attention_params, CoordAttention};
pub use deform::{direction_grid, level_shapes, ms_deform_attn_core, DeformAttn, LevelShape};
pub use encoder::{encoder_reference_points, EncoderLayer};
pub use fpn::Fpn;
pub use posenc::{pyramid_table, sine_table, TEMPERATURE};

use scb_tensor::{Real, Var};

use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, ParamBuilder, ParamId};

#[derive(Clone, Debug)]
pub struct HffaConfig {
    pub in_channels: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub points: usize,
    pub encoder_layers: usize,
    pub use_coord_attn: bool,
    pub ca_reduction: usize,
}

/// Encoder output: flattened multi-level tokens plus what the decoder needs to sample them.
pub struct Memory<'t, T: Real> {
    pub tokens: Var<'t, T>,
    pub levels: Vec<LevelShape>,
}

#[derive(Clone, Debug)]
pub struct Hffa {
    pub cfg: HffaConfig,
    pub fpn: Fpn,
    pub coord_attn: Vec<CoordAttention>,
    pub level_embed: ParamId,
    pub layers: Vec<EncoderLayer>,
}

impl Hffa {
    pub fn new(pb: &mut ParamBuilder, cfg: &HffaConfig) -> Result<Self> {
        if cfg.d_model % 4 != 0 || cfg.d_model % cfg.heads != 0 {
            return Err(Error::Validation(format!(
                "d_model {} must be divisible by 4 and by heads {}",
                cfg.d_model, cfg.heads
            )));
        }
        let l = cfg.in_channels.len();
        let fpn = Fpn::new(&mut pb.scope("fpn"), &cfg.in_channels, cfg.d_model);
        let coord_attn = if cfg.use_coord_attn {
            (0..l).map(|i| CoordAttention::new(&mut pb.scope(format!("coord_attn{i}")), cfg.d_model, cfg.ca_reduction)).collect()
        } else {
            Vec::new()
        };
        let level_embed = pb.tensor("level_embed", [l, cfg.d_model], Init::TruncNormal(0.02));
        let layers = (0..cfg.encoder_layers)
            .map(|i| EncoderLayer::new(&mut pb.scope(format!("encoder.layer{i}")), cfg.d_model, cfg.heads, l, cfg.points))
            .collect();
        Ok(Hffa { cfg: cfg.clone(), fpn, coord_attn, level_embed, layers })
    }

    /// Fused and attention-gated pyramid, each level `[D, H, W]`.
    pub fn fuse<'t, T: Real>(&self, ctx: &Ctx<'t, T>, pyramid: &[Var<'t, T>]) -> Result<Vec<Var<'t, T>>> {
        let mut levels = self.fpn.forward(ctx, pyramid)?;
        for (x, ca) in levels.iter_mut().zip(&self.coord_attn) {
            *x = ca.forward(ctx, *x)?;
        }
        Ok(levels)
    }

    /// Flattens `[D,H,W]` levels into `[sum(h*w), D]` tokens and runs the encoder.
    pub fn encode<'t, T: Real>(&self, ctx: &Ctx<'t, T>, fused: &[Var<'t, T>]) -> Result<Memory<'t, T>> {
        let d = self.cfg.d_model;
        let mut shapes = Vec::new();
        let mut tokens = Vec::new();
        let mut level_ids = Vec::new();
        for (i, x) in fused.iter().enumerate() {
            let s = x.shape();
            if s[0] != d {
                return Err(Error::Validation(format!("encoder: level {i} has {} channels, expected {d}", s[0])));
            }
            shapes.push((s[1], s[2]));
            tokens.push(x.reshape([d, s[1] * s[2]])?.transpose(0, 1)?);
            level_ids.extend(std::iter::repeat_n(i, s[1] * s[2]));
        }
        let levels = level_shapes(&shapes);
        let mut src = Var::concat(&tokens, 0)?;
        let pos = ctx
            .constant(pyramid_table(&shapes, d)?)
            .add(ctx.p(self.level_embed).index_select(&level_ids)?)?;
        let refs = ctx.constant(encoder_reference_points(&levels, levels.len()));
        for layer in &self.layers {
            src = layer.forward(ctx, src, pos, refs, &levels)?;
        }
        Ok(Memory { tokens: src, levels })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, pyramid: &[Var<'t, T>]) -> Result<Memory<'t, T>> {
        let fused = self.fuse(ctx, pyramid)?;
        self.encode(ctx, &fused)
    }
}
