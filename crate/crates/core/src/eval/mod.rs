//! COCO-style detection metrics: 101-point interpolated AP over IoU 0.50:0.05:0.95,
//! recall, confusion matrix and precision-recall export.

mod confusion;
mod export;

use serde::{Deserialize, Serialize};

pub use confusion::{confusion_matrix, ConfusionMatrix};
pub use export::{confusion_csv, parse_pr_csv, pr_csv, pr_svg, write_pr_csv, write_pr_svg};

use crate::box_ops::{iou, Box4};
use crate::error::{Error, Result};

/// A scored detection, box in xyxy (any unit, shared with the ground truth).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub class_id: usize,
    pub score: f64,
    pub bbox: Box4,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub class_id: usize,
    pub bbox: Box4,
}

/// Detections and ground truth of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageEval {
    pub dets: Vec<ScoredBox>,
    pub gts: Vec<LabeledBox>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Orders detections best first; equal scores keep their input order.
pub fn rank(dets: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy class-aware matching of `dets` (already sorted best first) to `gts`.
///
/// Each detection takes the unmatched same-class ground truth of highest IoU
/// (lowest index on ties) and is a true positive when that IoU reaches `iou_thresh`.
/// Returns per-detection TP flags and per-GT matched flags.
pub fn match_detections(dets: &[ScoredBox], gts: &[LabeledBox], iou_thresh: f64) -> (Vec<bool>, Vec<bool>) {
    let mut taken = vec![false; gts.len()];
    let flags = dets
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] || g.class_id != d.class_id {
                    continue;
                }
                let v = iou(d.bbox, g.bbox);
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, v)) if v >= iou_thresh => {
                    taken[gi] = true;
                    true
                }
                _ => false,
            }
        })
        .collect();
    (flags, taken)
}

/// Cumulative precision and recall along a ranked list of TP flags.
/// Returns the final `(precision, recall)` and one point per detection.
pub fn precision_recall(flags: &[bool], scores: &[f64], gt_count: usize) -> ((f64, f64), Vec<PrPoint>) {
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(flags.len());
    for (i, (&f, &score)) in flags.iter().zip(scores).enumerate() {
        tp += f as usize;
        let recall = if gt_count == 0 { 0.0 } else { tp as f64 / gt_count as f64 };
        points.push(PrPoint { score, precision: tp as f64 / (i + 1) as f64, recall });
    }
    let last = points.last().map_or((0.0, 0.0), |p| (p.precision, p.recall));
    (last, points)
}

/// 101-point interpolated AP: the mean over `r = 0, 0.01, ..., 1` of the best
/// precision reached at any recall `>= r` (0 when that recall is never reached).
pub fn average_precision(points: &[PrPoint]) -> f64 {
    // suffix maximum of precision
    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        while j < points.len() && points[j].recall < r {
            j += 1;
        }
        if j == points.len() {
            break;
        }
        sum += envelope[j];
    }
    sum / 101.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub max_dets: usize,
    pub confusion_iou: f64,
    pub confusion_score: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { max_dets: 100, confusion_iou: 0.5, confusion_score: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: String,
    pub gt_count: usize,
    /// AP at each IoU threshold; `None` for a class without ground truth.
    pub ap: Vec<Option<f64>>,
    pub ap_mean: Option<f64>,
    /// Final recall at each IoU threshold.
    pub recall: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    /// Recall with at most `max_dets` detections per image, averaged over the IoU grid.
    #[serde(rename = "AR100")]
    pub ar100: f64,
    /// Recall at IoU 0.5, class mean.
    pub recall50: f64,
    pub iou_thresholds: Vec<f64>,
    pub images: usize,
    pub max_dets: usize,
    pub per_class: Vec<ClassReport>,
    pub confusion: ConfusionMatrix,
}

/// Ranked `(flags, scores)` of class `c` over all images at one IoU threshold.
/// Detections are pooled best first, ties broken by image then input order.
fn class_ranking(images: &[ImageEval], kept: &[Vec<usize>], c: usize, thr: f64) -> (Vec<bool>, Vec<f64>) {
    let mut pooled: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (ii, (img, keep)) in images.iter().zip(kept).enumerate() {
        let dets: Vec<ScoredBox> = keep.iter().map(|&i| img.dets[i]).filter(|d| d.class_id == c).collect();
        let gts: Vec<LabeledBox> = img.gts.iter().copied().filter(|g| g.class_id == c).collect();
        let (flags, _) = match_detections(&dets, &gts, thr);
        pooled.extend(dets.iter().zip(flags).enumerate().map(|(k, (d, f))| (d.score, ii, k, f)));
    }
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    (pooled.iter().map(|p| p.3).collect(), pooled.iter().map(|p| p.0).collect())
}

/// Top `max_dets` detection indices per image, best first.
fn keep_top(images: &[ImageEval], max_dets: usize) -> Vec<Vec<usize>> {
    images.iter().map(|img| rank(&img.dets).into_iter().take(max_dets).collect()).collect()
}

/// Full evaluation over `num_classes` classes. Fails when no class has ground truth.
pub fn evaluate(images: &[ImageEval], class_names: &[String], cfg: &EvalConfig) -> Result<EvalReport> {
    let k = class_names.len();
    for img in images {
        if let Some(c) = img.dets.iter().map(|d| d.class_id).chain(img.gts.iter().map(|g| g.class_id)).find(|&c| c >= k) {
            return Err(Error::Validation(format!("class id {c} out of range for {k} classes")));
        }
    }
    let kept = keep_top(images, cfg.max_dets);
    let thresholds = iou_thresholds();
    let mut per_class = Vec::with_capacity(k);
    for (c, name) in class_names.iter().enumerate() {
        let gt_count = images.iter().flat_map(|i| &i.gts).filter(|g| g.class_id == c).count();
        let (mut ap, mut recall) = (Vec::new(), Vec::new());
        for &thr in &thresholds {
            if gt_count == 0 {
                ap.push(None);
                recall.push(None);
                continue;
            }
            let (flags, scores) = class_ranking(images, &kept, c, thr);
            let ((_, r), points) = precision_recall(&flags, &scores, gt_count);
            ap.push(Some(average_precision(&points)));
            recall.push(Some(r));
        }
        let ap_mean = (gt_count > 0).then(|| ap.iter().flatten().sum::<f64>() / thresholds.len() as f64);
        per_class.push(ClassReport { class_id: c, name: name.clone(), gt_count, ap, ap_mean, recall });
    }
    let valid: Vec<&ClassReport> = per_class.iter().filter(|c| c.gt_count > 0).collect();
    if valid.is_empty() {
        return Err(Error::Validation("mAP is undefined: no class has any ground truth".into()));
    }
    let n = valid.len() as f64;
    let at = |v: &[Option<f64>], i: usize| v[i].expect("class with ground truth");
    let class_mean = |f: &dyn Fn(&ClassReport) -> f64| valid.iter().map(|c| f(c)).sum::<f64>() / n;
    let mut dets_kept = Vec::new();
    for (img, keep) in images.iter().zip(&kept) {
        dets_kept.push(keep.iter().map(|&i| img.dets[i]).collect::<Vec<_>>());
    }
    let confusion = confusion_matrix(
        &images.iter().zip(&dets_kept).map(|(img, d)| (d.as_slice(), img.gts.as_slice())).collect::<Vec<_>>(),
        k,
        cfg.confusion_iou,
        cfg.confusion_score,
    );
    Ok(EvalReport {
        map: class_mean(&|c| c.ap_mean.expect("class with ground truth")),
        ap50: class_mean(&|c| at(&c.ap, 0)),
        ap75: class_mean(&|c| at(&c.ap, 5)),
        ar100: class_mean(&|c| c.recall.iter().flatten().sum::<f64>() / thresholds.len() as f64),
        recall50: class_mean(&|c| at(&c.recall, 0)),
        iou_thresholds: thresholds,
        images: images.len(),
        max_dets: cfg.max_dets,
        per_class,
        confusion,
    })
}

/// Precision-recall curve at one IoU threshold with every class pooled into a
/// single ranking (class-aware matching), for plotting.
pub fn pooled_curve(images: &[ImageEval], num_classes: usize, iou_thresh: f64, max_dets: usize) -> Vec<PrPoint> {
    let kept = keep_top(images, max_dets);
    let mut pooled: Vec<(f64, usize, usize, usize, bool)> = Vec::new();
    for c in 0..num_classes {
        for (ii, (img, keep)) in images.iter().zip(&kept).enumerate() {
            let dets: Vec<ScoredBox> = keep.iter().map(|&i| img.dets[i]).filter(|d| d.class_id == c).collect();
            let gts: Vec<LabeledBox> = img.gts.iter().copied().filter(|g| g.class_id == c).collect();
            let (flags, _) = match_detections(&dets, &gts, iou_thresh);
            pooled.extend(dets.iter().zip(flags).enumerate().map(|(k, (d, f))| (d.score, ii, c, k, f)));
        }
    }
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    let gt_total = images.iter().map(|i| i.gts.len()).sum();
    let flags: Vec<bool> = pooled.iter().map(|p| p.4).collect();
    let scores: Vec<f64> = pooled.iter().map(|p| p.0).collect();
    precision_recall(&flags, &scores, gt_total).1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sb(c: usize, s: f64, b: Box4) -> ScoredBox {
        ScoredBox { class_id: c, score: s, bbox: b }
    }

    const UNIT: Box4 = [0.0, 0.0, 1.0, 1.0];

    #[test]
    fn matching_rules() {
        let g = [LabeledBox { class_id: 0, bbox: UNIT }];
        assert_eq!(match_detections(&[sb(0, 0.9, UNIT)], &g, 0.5).0, vec![true]);
        assert_eq!(match_detections(&[sb(0, 0.9, UNIT), sb(0, 0.8, UNIT)], &g, 0.5).0, vec![true, false]);
        assert_eq!(match_detections(&[sb(1, 0.9, UNIT)], &g, 0.5), (vec![false], vec![false]));
    }

    #[test]
    fn precision_recall_counts() {
        assert_eq!(precision_recall(&[true, true], &[0.9, 0.8], 2).0, (1.0, 1.0));
        assert_eq!(precision_recall(&[true], &[0.9], 2).0, (1.0, 0.5));
        assert_eq!(precision_recall(&[], &[], 3).0, (0.0, 0.0));
    }

    #[test]
    fn ap_hand_cases() {
        let pts = |flags: &[bool], gt| precision_recall(flags, &vec![0.5; flags.len()], gt).1;
        assert_eq!(average_precision(&pts(&[true, true], 2)), 1.0);
        assert_eq!(average_precision(&pts(&[false], 1)), 0.0);
        let ap = average_precision(&pts(&[true, false, true], 2));
        assert!((ap - (51.0 + 50.0 * 2.0 / 3.0) / 101.0).abs() < 1e-12);
        assert!((ap - 0.8350).abs() < 1e-4);
    }

    #[test]
    fn map_over_two_classes() {
        let img = ImageEval {
            dets: vec![sb(0, 0.9, UNIT)],
            gts: vec![LabeledBox { class_id: 0, bbox: UNIT }, LabeledBox { class_id: 1, bbox: [2.0, 2.0, 3.0, 3.0] }],
        };
        let r = evaluate(&[img], &["a".into(), "b".into(), "c".into()], &EvalConfig::default()).unwrap();
        assert_eq!((r.map, r.ap50), (0.5, 0.5));
        assert_eq!(r.per_class[2].ap_mean, None);
        assert!(evaluate(&[ImageEval::default()], &["a".into()], &EvalConfig::default()).is_err());
    }
}
