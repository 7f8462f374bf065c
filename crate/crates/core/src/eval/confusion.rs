use serde::{Deserialize, Serialize};

use super::{rank, LabeledBox, ScoredBox};
use crate::box_ops::iou;

/// `(K+1) x (K+1)` counts; rows are ground-truth classes, columns predicted
/// classes, index `K` is background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn background(&self) -> usize {
        self.num_classes
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }
}

/// Class-agnostic greedy matching, best score first, of detections scoring at
/// least `score_thresh` against the ground truth of each image.
pub fn confusion_matrix(
    images: &[(&[ScoredBox], &[LabeledBox])],
    num_classes: usize,
    iou_thresh: f64,
    score_thresh: f64,
) -> ConfusionMatrix {
    let bg = num_classes;
    let mut counts = vec![vec![0u64; num_classes + 1]; num_classes + 1];
    for &(dets, gts) in images {
        let mut taken = vec![false; gts.len()];
        for i in rank(dets) {
            let d = &dets[i];
            if d.score < score_thresh {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                let v = iou(d.bbox, g.bbox);
                if !taken[gi] && best.map_or(true, |(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, v)) if v >= iou_thresh => {
                    taken[gi] = true;
                    counts[gts[gi].class_id][d.class_id] += 1;
                }
                _ => counts[bg][d.class_id] += 1,
            }
        }
        for (g, _) in gts.iter().zip(&taken).filter(|(_, t)| !**t) {
            counts[g.class_id][bg] += 1;
        }
    }
    ConfusionMatrix { num_classes, counts }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_and_misses() {
        let b = [0.0, 0.0, 1.0, 1.0];
        let far = [5.0, 5.0, 6.0, 6.0];
        let dets = [ScoredBox { class_id: 1, score: 0.9, bbox: b }];
        let gts = [LabeledBox { class_id: 1, bbox: b }, LabeledBox { class_id: 2, bbox: far }];
        let m = confusion_matrix(&[(&dets, &gts)], 3, 0.5, 0.5);
        assert_eq!(m.counts[1][1], 1);
        assert_eq!(m.counts[2][3], 1);
        assert_eq!(m.row_sums(), vec![0, 1, 1, 0]);
        // cross-class confusion is visible
        let wrong = [ScoredBox { class_id: 0, score: 0.9, bbox: b }];
        let m = confusion_matrix(&[(&wrong, &gts[..1])], 3, 0.5, 0.5);
        assert_eq!(m.counts[1][0], 1);
    }
}
