//! The full detector: backbone, fusion and encoder, decoder, heads.

use scb_tensor::{Real, RngState, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::decoder::{Decoder, Heads};
use crate::error::{Error, Result};
use crate::hffa::{coord_attention_params, Hffa, HffaConfig};
use crate::nn::{Ctx, ParamBuilder, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub d_model: usize,
    pub heads: usize,
    pub points: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub queries: usize,
    pub num_classes: usize,
    pub use_coord_attn: bool,
    pub ca_reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            d_model: 128,
            heads: 8,
            points: 4,
            encoder_layers: 4,
            decoder_layers: 3,
            queries: 50,
            num_classes: 3,
            use_coord_attn: true,
            ca_reduction: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("points", self.points),
            ("decoder_layers", self.decoder_layers),
            ("queries", self.queries),
            ("num_classes", self.num_classes),
            ("ca_reduction", self.ca_reduction),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Validation(format!("model.{name} must be >= 1")));
        }
        if self.d_model % 4 != 0 || self.d_model % self.heads != 0 {
            return Err(Error::Validation(format!(
                "model.d_model {} must be divisible by 4 and by model.heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    fn hffa(&self) -> HffaConfig {
        HffaConfig {
            in_channels: self.backbone.channels().to_vec(),
            d_model: self.d_model,
            heads: self.heads,
            points: self.points,
            encoder_layers: self.encoder_layers,
            use_coord_attn: self.use_coord_attn,
            ca_reduction: self.ca_reduction,
        }
    }

    /// Parameter count of the coordinate-attention units (zero when disabled).
    pub fn coord_attn_param_count(&self) -> usize {
        if self.use_coord_attn {
            4 * coord_attention_params(self.d_model, self.ca_reduction)
        } else {
            0
        }
    }
}

/// Class logits and boxes of one decoder layer.
pub struct LayerOutput<'t, T: Real> {
    pub logits: Var<'t, T>,
    pub boxes: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub hffa: Hffa,
    pub decoder: Decoder,
    pub heads: Heads,
}

impl Detector {
    /// Builds the model and its freshly initialised parameters.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Detector, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = RngState::new(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let backbone = Backbone::new(&mut pb.scope("backbone"), &cfg.backbone)?;
        let hffa = Hffa::new(&mut pb.scope("hffa"), &cfg.hffa())?;
        let decoder = Decoder::new(
            &mut pb.scope("decoder"),
            cfg.d_model,
            cfg.queries,
            cfg.decoder_layers,
            cfg.heads,
            4,
            cfg.points,
        );
        let heads = Heads::new(&mut pb.scope("heads"), cfg.d_model, cfg.num_classes);
        Ok((Detector { cfg: cfg.clone(), backbone, hffa, decoder, heads }, store))
    }

    /// Per-decoder-layer predictions for one normalised image `[3,H,W]`.
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, image: Var<'t, T>) -> Result<Vec<LayerOutput<'t, T>>> {
        let pyramid = self.backbone.forward(ctx, image)?;
        let memory = self.hffa.forward(ctx, &pyramid)?;
        let embeds = self.decoder.forward(ctx, &memory)?;
        embeds
            .into_iter()
            .map(|e| {
                let (logits, boxes) = self.heads.forward(ctx, e)?;
                Ok(LayerOutput { logits, boxes })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_toggles_change_parameter_count_by_formula() {
        let base = ModelConfig { backbone: BackboneConfig { base_channels: 8, ..Default::default() }, d_model: 16, queries: 5, ..Default::default() };
        let (_, full) = Detector::new(&base, 0).unwrap();
        let no_ca = ModelConfig { use_coord_attn: false, ..base.clone() };
        let (_, s) = Detector::new(&no_ca, 0).unwrap();
        assert_eq!(full.numel() - s.numel(), base.coord_attn_param_count());
        let no_lsk = ModelConfig { backbone: BackboneConfig { use_lsk: false, ..base.backbone.clone() }, ..base.clone() };
        let (_, s) = Detector::new(&no_lsk, 0).unwrap();
        assert_eq!(s.numel() as i64 - full.numel() as i64, no_lsk.backbone.param_count() as i64 - base.backbone.param_count() as i64);
    }
}
