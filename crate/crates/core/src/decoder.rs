//! Query decoder, prediction heads and detection post-processing.

use scb_tensor::{Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hffa::{DeformAttn, Memory};
use crate::nn::{Ctx, Ffn, Init, LayerNorm, Linear, ParamBuilder, ParamId};

/// Scaled dot-product attention with `heads` heads of width `D/heads`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder, d: usize, heads: usize) -> Self {
        MultiHeadAttention {
            q_proj: Linear::new(&mut pb.scope("q_proj"), d, d),
            k_proj: Linear::new(&mut pb.scope("k_proj"), d, d),
            v_proj: Linear::new(&mut pb.scope("v_proj"), d, d),
            out_proj: Linear::new(&mut pb.scope("out_proj"), d, d),
            heads,
        }
    }

    /// Returns the output `[Nq, D]` and the attention weights `[M, Nq, Nk]`.
    pub fn forward_with_weights<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, T>,
        q: Var<'t, T>,
        k: Var<'t, T>,
        v: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (nq, d) = (q.shape()[0], q.shape()[1]);
        let nk = k.shape()[0];
        if d % self.heads != 0 || k.shape()[1] != d || v.shape() != k.shape() {
            return Err(Error::Validation(format!(
                "attention: q {:?}, k {:?}, v {:?} with {} heads",
                q.shape(),
                k.shape(),
                v.shape(),
                self.heads
            )));
        }
        let (m, dh) = (self.heads, d / self.heads);
        let qh = self.q_proj.forward(ctx, q)?.reshape([nq, m, dh])?.permute(&[1, 0, 2])?;
        let kh = self.k_proj.forward(ctx, k)?.reshape([nk, m, dh])?.permute(&[1, 2, 0])?;
        let vh = self.v_proj.forward(ctx, v)?.reshape([nk, m, dh])?.permute(&[1, 0, 2])?;
        let scores = qh.matmul(kh)?.mul_scalar(T::from_f64(1.0 / (dh as f64).sqrt()))?;
        let attn = scores.softmax(-1)?;
        let heads = attn.matmul(vh)?.permute(&[1, 0, 2])?.reshape([nq, d])?;
        Ok((self.out_proj.forward(ctx, heads)?, attn))
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, q: Var<'t, T>, k: Var<'t, T>, v: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.forward_with_weights(ctx, q, k, v)?.0)
    }
}

/// Self-attention, deformable cross-attention into the encoder memory, FFN; each with add & norm.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: DeformAttn,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(pb: &mut ParamBuilder, d: usize, heads: usize, levels: usize, points: usize) -> Self {
        DecoderLayer {
            self_attn: MultiHeadAttention::new(&mut pb.scope("self_attn"), d, heads),
            norm1: LayerNorm::new(&mut pb.scope("norm1"), d),
            cross_attn: DeformAttn::new(&mut pb.scope("cross_attn"), d, heads, levels, points),
            norm2: LayerNorm::new(&mut pb.scope("norm2"), d),
            ffn: Ffn::new(&mut pb.scope("ffn"), d, 4 * d),
            norm3: LayerNorm::new(&mut pb.scope("norm3"), d),
        }
    }

    pub fn forward<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, T>,
        tgt: Var<'t, T>,
        pos: Var<'t, T>,
        refs: Var<'t, T>,
        memory: &Memory<'t, T>,
    ) -> Result<Var<'t, T>> {
        let qk = tgt.add(pos)?;
        let x = self.norm1.forward(ctx, tgt.add(self.self_attn.forward(ctx, qk, qk, tgt)?)?, -1)?;
        let c = self.cross_attn.forward(ctx, x.add(pos)?, refs, memory.tokens, &memory.levels)?;
        let x = self.norm2.forward(ctx, x.add(c)?, -1)?;
        let y = self.ffn.forward(ctx, x)?;
        self.norm3.forward(ctx, x.add(y)?, -1)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub query_embed: ParamId,
    pub ref_point: Linear,
    pub layers: Vec<DecoderLayer>,
    pub queries: usize,
}

impl Decoder {
    pub fn new(pb: &mut ParamBuilder, d: usize, queries: usize, layers: usize, heads: usize, levels: usize, points: usize) -> Self {
        Decoder {
            query_embed: pb.tensor("query_embed", [queries, d], Init::TruncNormal(1.0)),
            ref_point: Linear::with_init(
                &mut pb.scope("ref_point"),
                d,
                2,
                Init::XavierUniform { fan_in: d, fan_out: 2 },
                Init::Zeros,
            ),
            layers: (0..layers)
                .map(|i| DecoderLayer::new(&mut pb.scope(format!("layer{i}")), d, heads, levels, points))
                .collect(),
            queries,
        }
    }

    /// Reference points `[Q, 2]` in `(0,1)`.
    pub fn reference_points<'t, T: Real>(&self, ctx: &Ctx<'t, T>) -> Result<Var<'t, T>> {
        self.ref_point.forward(ctx, ctx.p(self.query_embed))?.sigmoid().map_err(Into::into)
    }

    /// Embeddings after every layer, `[Q, D]` each.
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, memory: &Memory<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let embed = ctx.p(self.query_embed);
        let l = memory.levels.len();
        let refs = self.reference_points(ctx)?.reshape([self.queries, 1, 2])?.broadcast_to([self.queries, l, 2])?;
        let mut tgt = embed;
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            tgt = layer.forward(ctx, tgt, embed, refs, memory)?;
            outs.push(tgt);
        }
        Ok(outs)
    }
}

/// Prior probability the class logits start at, keeping the focal loss small at initialisation.
pub const CLASS_PRIOR: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct Heads {
    pub class: Linear,
    pub box_mlp: [Linear; 3],
}

impl Heads {
    pub fn new(pb: &mut ParamBuilder, d: usize, num_classes: usize) -> Self {
        let prior_bias = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
        let class =
            Linear::with_init(&mut pb.scope("class_head"), d, num_classes, Init::TruncNormal(0.02), Init::Const(prior_bias));
        let mut bp = pb.scope("box_head");
        Heads {
            class,
            box_mlp: [
                Linear::new(&mut bp.scope("fc0"), d, d),
                Linear::new(&mut bp.scope("fc1"), d, d),
                Linear::new(&mut bp.scope("fc2"), d, 4),
            ],
        }
    }

    /// Raw class logits `[Q, K]` and sigmoid boxes `[Q, 4]` in normalised cxcywh.
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, embed: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let logits = self.class.forward(ctx, embed)?;
        let h = self.box_mlp[0].forward(ctx, embed)?.relu()?;
        let h = self.box_mlp[1].forward(ctx, h)?.relu()?;
        let boxes = self.box_mlp[2].forward(ctx, h)?.sigmoid()?;
        Ok((logits, boxes))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub query: usize,
    pub class_id: usize,
    pub score: f64,
    /// Normalised `(cx, cy, w, h)`.
    pub bbox: [f64; 4],
}

/// Scores every (query, class) pair with a sigmoid and keeps those strictly above
/// `score_threshold`, best first, at most `max_dets`.
///
/// Ties are ordered by query then class index, so the result is fully deterministic.
pub fn postprocess<T: Real>(logits: &Tensor<T>, boxes: &Tensor<T>, score_threshold: f64, max_dets: usize) -> Vec<Detection> {
    let (q, k) = (logits.shape()[0], logits.shape()[1]);
    let mut dets = Vec::new();
    for qi in 0..q {
        let b = std::array::from_fn(|i| boxes.data()[qi * 4 + i].as_f64());
        for c in 0..k {
            let score = sigmoid(logits.data()[qi * k + c].as_f64());
            if score > score_threshold {
                dets.push(Detection { query: qi, class_id: c, score, bbox: b });
            }
        }
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.query.cmp(&b.query)).then(a.class_id.cmp(&b.class_id)));
    dets.truncate(max_dets);
    dets
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
