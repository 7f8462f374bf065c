//! Set-prediction objective: focal classification plus Smooth-L1 and GIoU box
//! terms on Hungarian-matched pairs, summed over every decoder layer.

mod hungarian;
mod terms;

use scb_tensor::{Real, Var};
use serde::{Deserialize, Serialize};

pub use hungarian::{hungarian_match, MatchResult};
pub use terms::{focal_loss, focal_scalar, giou_loss, smooth_l1_loss, PROB_EPS};

use crate::box_ops::{cxcywh_to_xyxy, giou, smooth_l1, Box4};
use crate::decoder::sigmoid;
use crate::error::{Error, Result};
use crate::model::LayerOutput;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls_weight: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cls_weight: 2.0, l1_weight: 4.0, giou_weight: 2.0, focal_alpha: 0.25, focal_gamma: 2.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("cls_weight", self.cls_weight),
            ("l1_weight", self.l1_weight),
            ("giou_weight", self.giou_weight),
            ("focal_gamma", self.focal_gamma),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(format!("loss.{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Validation(format!("loss.focal_alpha must be in [0, 1], got {}", self.focal_alpha)));
        }
        Ok(())
    }

    /// Same weights with the three term weights multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        LossWeights { cls_weight: self.cls_weight * s, l1_weight: self.l1_weight * s, giou_weight: self.giou_weight * s, ..*self }
    }

    fn combine(&self, cls: f64, l1: f64, giou: f64) -> f64 {
        self.cls_weight * cls + self.l1_weight * l1 + self.giou_weight * giou
    }
}

/// One annotated object: class index and normalised cxcywh box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: Box4,
}

/// Matching costs of every (prediction, ground truth) pair, with the unweighted
/// components kept alongside the weighted total.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub preds: usize,
    pub gts: usize,
    pub weights: LossWeights,
    pub cls: Vec<f64>,
    pub l1: Vec<f64>,
    /// `1 - GIoU`.
    pub giou: Vec<f64>,
    pub total: Vec<f64>,
}

impl CostMatrix {
    pub fn get(&self, p: usize, g: usize) -> f64 {
        self.total[p * self.gts + g]
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.preds, self.gts]
    }
}

/// Focal-style class cost: positive focal term minus the negative one at the GT class.
pub fn class_cost(p: f64, alpha: f64, gamma: f64) -> f64 {
    focal_scalar(p, true, alpha, gamma) - focal_scalar(p, false, alpha, gamma)
}

/// Costs from plain values: `logits` `[P,K]` and `boxes` `[P,4]`, both row-major.
pub fn build_cost_matrix(logits: &[f64], boxes: &[f64], num_classes: usize, gts: &[GroundTruth], w: &LossWeights) -> CostMatrix {
    let preds = boxes.len() / 4;
    assert_eq!(logits.len(), preds * num_classes, "logits must be [P, K]");
    let n = preds * gts.len();
    let (mut cls, mut l1, mut gi, mut total) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for p in 0..preds {
        let pb: Box4 = std::array::from_fn(|i| boxes[p * 4 + i]);
        for gt in gts {
            let c = class_cost(sigmoid(logits[p * num_classes + gt.class_id]), w.focal_alpha, w.focal_gamma);
            let l = smooth_l1(pb, gt.bbox);
            let g = 1.0 - giou(cxcywh_to_xyxy(pb), cxcywh_to_xyxy(gt.bbox));
            cls.push(c);
            l1.push(l);
            gi.push(g);
            total.push(w.combine(c, l, g));
        }
    }
    CostMatrix { preds, gts: gts.len(), weights: *w, cls, l1, giou: gi, total }
}

impl CostMatrix {
    pub fn solve(&self) -> MatchResult {
        hungarian_match(&self.total, self.preds, self.gts)
    }
}

/// Unweighted, GT-normalised components of one decoder layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerLoss {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub layers: Vec<LayerLoss>,
    /// Component sums over layers.
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    /// Weighted total over all layers.
    pub total: f64,
}

impl LossReport {
    fn from_layers(layers: Vec<LayerLoss>, w: &LossWeights) -> Self {
        let cls = layers.iter().map(|l| l.cls).sum();
        let l1 = layers.iter().map(|l| l.l1).sum();
        let giou = layers.iter().map(|l| l.giou).sum();
        let total = layers.iter().map(|l| w.combine(l.cls, l.l1, l.giou)).sum();
        LossReport { layers, cls, l1, giou, total }
    }

    /// Recomputes the weighted total from the per-layer breakdown.
    pub fn recompute_total(&self, w: &LossWeights) -> f64 {
        self.layers.iter().map(|l| w.combine(l.cls, l.l1, l.giou)).sum()
    }

    /// Field-wise mean of per-image reports (all with the same layer count).
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let layers = reports.first().map_or(0, |r| r.layers.len());
        let avg = |f: &dyn Fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        LossReport {
            layers: (0..layers)
                .map(|i| LayerLoss {
                    cls: avg(&|r| r.layers[i].cls),
                    l1: avg(&|r| r.layers[i].l1),
                    giou: avg(&|r| r.layers[i].giou),
                })
                .collect(),
            cls: avg(&|r| r.cls),
            l1: avg(&|r| r.l1),
            giou: avg(&|r| r.giou),
            total: avg(&|r| r.total),
        }
    }
}

/// Loss of one decoder layer against `gts`, matched on detached values.
/// Returns the weighted differentiable loss, its components and the matching.
pub fn layer_loss<'t, T: Real>(
    logits: Var<'t, T>,
    boxes: Var<'t, T>,
    gts: &[GroundTruth],
    w: &LossWeights,
) -> Result<(Var<'t, T>, LayerLoss, MatchResult)> {
    let (q, k) = (logits.shape()[0], logits.shape()[1]);
    if boxes.shape() != [q, 4] {
        return Err(Error::Validation(format!("boxes {:?} do not match logits {:?}", boxes.shape(), logits.shape())));
    }
    if let Some(g) = gts.iter().find(|g| g.class_id >= k) {
        return Err(Error::Validation(format!("ground-truth class {} out of range for {k} classes", g.class_id)));
    }
    let lv = logits.value().to_f64_vec();
    let bv = boxes.value().to_f64_vec();
    let matching = build_cost_matrix(&lv, &bv, k, gts, w).solve();

    let norm = gts.len().max(1) as f64;
    let tape = logits.tape();
    let mut targets = vec![false; q * k];
    for &(p, g) in &matching.pairs {
        targets[p * k + gts[g].class_id] = true;
    }
    let cls = focal_loss(logits, &targets, w.focal_alpha, w.focal_gamma)?;
    let (l1, gi) = if matching.pairs.is_empty() {
        (tape.scalar(T::zero()), tape.scalar(T::zero()))
    } else {
        let idx: Vec<usize> = matching.pairs.iter().map(|&(p, _)| p).collect();
        let tgt: Vec<Box4> = matching.pairs.iter().map(|&(_, g)| gts[g].bbox).collect();
        let matched = boxes.index_select(&idx)?;
        (smooth_l1_loss(matched, &tgt)?, giou_loss(matched, &tgt)?)
    };
    let inv = T::from_f64(1.0 / norm);
    let (cls, l1, gi) = (cls.mul_scalar(inv)?, l1.mul_scalar(inv)?, gi.mul_scalar(inv)?);
    let parts = LayerLoss { cls: cls.item().as_f64(), l1: l1.item().as_f64(), giou: gi.item().as_f64() };
    let total = cls
        .mul_scalar(T::from_f64(w.cls_weight))?
        .add(l1.mul_scalar(T::from_f64(w.l1_weight))?)?
        .add(gi.mul_scalar(T::from_f64(w.giou_weight))?)?;
    Ok((total, parts, matching))
}

/// Sum of [`layer_loss`] over every decoder layer of one image.
pub fn hungarian_loss<'t, T: Real>(
    outputs: &[LayerOutput<'t, T>],
    gts: &[GroundTruth],
    w: &LossWeights,
) -> Result<(Var<'t, T>, LossReport)> {
    if outputs.is_empty() {
        return Err(Error::Validation("loss needs at least one decoder layer output".into()));
    }
    let mut total: Option<Var<'t, T>> = None;
    let mut layers = Vec::with_capacity(outputs.len());
    for out in outputs {
        let (l, parts, _) = layer_loss(out.logits, out.boxes, gts, w)?;
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
        layers.push(parts);
    }
    Ok((total.expect("non-empty"), LossReport::from_layers(layers, w)))
}
