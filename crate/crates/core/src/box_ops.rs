//! Plain `f64` box geometry shared by matching, evaluation and data loading.

pub type Box4 = [f64; 4];

pub fn cxcywh_to_xyxy(b: Box4) -> Box4 {
    let [cx, cy, w, h] = b;
    [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
}

pub fn xyxy_to_cxcywh(b: Box4) -> Box4 {
    let [x1, y1, x2, y2] = b;
    [(x1 + x2) * 0.5, (y1 + y2) * 0.5, x2 - x1, y2 - y1]
}

pub fn area(b: Box4) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

fn intersection(a: Box4, b: Box4) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    w * h
}

/// IoU of two xyxy boxes; 0 when the union has zero area.
pub fn iou(a: Box4, b: Box4) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalised IoU of two xyxy boxes, in `[-1, 1]`.
pub fn giou(a: Box4, b: Box4) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    if hull <= 0.0 {
        iou
    } else {
        iou - (hull - union) / hull
    }
}

/// Smooth-L1 with knot at 1, summed over the four coordinates.
pub fn smooth_l1(a: Box4, b: Box4) -> f64 {
    a.iter().zip(&b).map(|(x, y)| smooth_l1_scalar(x - y)).sum()
}

pub fn smooth_l1_scalar(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}
