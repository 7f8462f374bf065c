//! Differentiable loss terms. Each returns an unnormalised sum.

use scb_tensor::{Real, Tensor, Var};

use crate::box_ops::{cxcywh_to_xyxy, smooth_l1_scalar, Box4};
use crate::error::Result;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any logarithm.
pub const PROB_EPS: f64 = 1e-8;

/// Binary focal loss of one probability: `-a_t (1 - p_t)^gamma ln p_t`.
pub fn focal_scalar(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if positive {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// `d focal / d p`, zero where the clamp is active.
fn focal_dp(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    // gamma * x^(gamma - 1) is taken as 0 when gamma is 0
    let pow_m1 = |x: f64| if gamma == 0.0 { 0.0 } else { gamma * x.powf(gamma - 1.0) };
    if positive {
        alpha * (pow_m1(1.0 - p) * p.ln() - (1.0 - p).powf(gamma) / p)
    } else {
        -(1.0 - alpha) * (pow_m1(p) * (1.0 - p).ln() - p.powf(gamma) / (1.0 - p))
    }
}

/// Focal loss summed over every entry of `logits`, with sigmoid probabilities and
/// 0/1 `targets` of the same length. Evaluated in `f64` whatever `T` is.
pub fn focal_loss<'t, T: Real>(logits: Var<'t, T>, targets: &[bool], alpha: f64, gamma: f64) -> Result<Var<'t, T>> {
    let x = logits.value();
    assert_eq!(x.numel(), targets.len(), "one target per logit");
    let probs: Vec<f64> = x.data().iter().map(|v| crate::decoder::sigmoid(v.as_f64())).collect();
    let total: f64 = probs.iter().zip(targets).map(|(&p, &t)| focal_scalar(p, t, alpha, gamma)).sum();
    let targets = targets.to_vec();
    let shape = x.shape().to_vec();
    let out = logits.tape().custom_op("focal_loss", &[logits], Tensor::scalar(T::from_f64(total)), move |g| {
        let g = g.item().as_f64();
        let d = probs
            .iter()
            .zip(&targets)
            .map(|(&p, &t)| T::from_f64(g * focal_dp(p, t, alpha, gamma) * p * (1.0 - p)))
            .collect();
        vec![Some(Tensor::new(shape, d).expect("focal grad"))]
    })?;
    Ok(out)
}

/// Smooth-L1 summed over all coordinates of `pred` against constant `target` boxes.
pub fn smooth_l1_loss<'t, T: Real>(pred: Var<'t, T>, target: &[Box4]) -> Result<Var<'t, T>> {
    let t = constant_boxes(pred, target, |b| b)?;
    let d = pred.sub(t)?;
    let f = |d: T| T::from_f64(smooth_l1_scalar(d.as_f64()));
    let df = |d: T| {
        let v = d.as_f64();
        T::from_f64(if v.abs() < 1.0 { v } else { v.signum() })
    };
    Ok(d.map_elementwise("smooth_l1", f, df)?.sum_all()?)
}

/// `sum(1 - GIoU)` between predicted cxcywh boxes `[n,4]` and constant targets.
pub fn giou_loss<'t, T: Real>(pred: Var<'t, T>, target: &[Box4]) -> Result<Var<'t, T>> {
    let n = target.len();
    let t = constant_boxes(pred, target, cxcywh_to_xyxy)?;
    let col = |v: Var<'t, T>, i: usize| v.narrow(1, i, 1);
    let half = T::from_f64(0.5);
    let (cx, cy, w, h) = (col(pred, 0)?, col(pred, 1)?, col(pred, 2)?, col(pred, 3)?);
    let (hw, hh) = (w.mul_scalar(half)?, h.mul_scalar(half)?);
    let (px1, py1, px2, py2) = (cx.sub(hw)?, cy.sub(hh)?, cx.add(hw)?, cy.add(hh)?);
    let (tx1, ty1, tx2, ty2) = (col(t, 0)?, col(t, 1)?, col(t, 2)?, col(t, 3)?);

    let iw = px2.minimum(tx2)?.sub(px1.maximum(tx1)?)?.clamp_min(T::zero())?;
    let ih = py2.minimum(ty2)?.sub(py1.maximum(ty1)?)?.clamp_min(T::zero())?;
    let inter = iw.mul(ih)?;
    let area_p = px2.sub(px1)?.mul(py2.sub(py1)?)?;
    let area_t = tx2.sub(tx1)?.mul(ty2.sub(ty1)?)?;
    let union = area_p.add(area_t)?.sub(inter)?;
    let iou = inter.div(union)?;
    let hull = px2.maximum(tx2)?.sub(px1.minimum(tx1)?)?.mul(py2.maximum(ty2)?.sub(py1.minimum(ty1)?)?)?;
    let giou = iou.sub(hull.sub(union)?.div(hull)?)?;
    Ok(giou.sum_all()?.rsub_scalar(T::from_f64(n as f64))?)
}

fn constant_boxes<'t, T: Real>(like: Var<'t, T>, boxes: &[Box4], f: impl Fn(Box4) -> Box4) -> Result<Var<'t, T>> {
    let data: Vec<f64> = boxes.iter().flat_map(|&b| f(b)).collect();
    Ok(like.tape().constant(Tensor::from_f64([boxes.len(), 4], &data)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_hand_values() {
        assert!(focal_scalar(1.0, true, 0.25, 2.0) < 1e-20);
        let v = focal_scalar(0.9, true, 0.25, 2.0);
        assert!((v - 2.634e-4).abs() < 1e-7, "{v}");
        for &(p, t) in &[(0.3, true), (0.3, false), (0.99, false)] {
            let bce = if t { -f64::ln(p) } else { -f64::ln(1.0 - p) };
            assert!((focal_scalar(p, t, 0.5, 0.0) - 0.5 * bce).abs() < 1e-15);
        }
    }

    #[test]
    fn focal_derivative_matches_difference_quotient() {
        for &gamma in &[0.0, 1.0, 2.0, 2.5] {
            for &t in &[true, false] {
                for &p in &[0.05, 0.3, 0.7, 0.95] {
                    let h = 1e-6;
                    let num = (focal_scalar(p + h, t, 0.25, gamma) - focal_scalar(p - h, t, 0.25, gamma)) / (2.0 * h);
                    let ana = focal_dp(p, t, 0.25, gamma);
                    assert!((num - ana).abs() < 1e-6 * (1.0 + ana.abs()), "{gamma} {t} {p}: {num} vs {ana}");
                }
            }
        }
    }
}
