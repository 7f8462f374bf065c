//! Running a trained detector: per-image predictions and dataset evaluation.

use scb_tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::box_ops::Box4;
use crate::data::{prepare, DataConfig, Dataset, Letterbox, RgbImage};
use crate::decoder::{postprocess, Detection};
use crate::error::{parse_json, Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport, ImageEval, LabeledBox, ScoredBox};
use crate::model::Detector;
use crate::nn::{Ctx, ParamStore};
use crate::train::Checkpoint;

/// A detection in source-image pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelDetection {
    pub class_id: usize,
    pub class_name: String,
    pub score: f64,
    /// `[x1, y1, x2, y2]` in pixels of the original image.
    pub bbox: Box4,
}

/// Final-layer detections for one preprocessed `[3,S,S]` canvas, in canvas cxcywh.
pub fn predict(model: &Detector, store: &ParamStore, image: &Tensor<f32>, score_threshold: f64, max_dets: usize) -> Result<Vec<Detection>> {
    let tape = Tape::<f32>::new().with_paranoid(false);
    let ctx = Ctx::bind(&tape, store, false);
    let outs = model.forward(&ctx, tape.constant(image.clone()))?;
    let last = outs.last().expect("decoder has at least one layer");
    Ok(postprocess(&last.logits.value(), &last.boxes.value(), score_threshold, max_dets))
}

/// Letterboxes a raw image, predicts, and maps boxes back to its pixels.
pub fn infer_image(
    model: &Detector,
    store: &ParamStore,
    img: &RgbImage,
    data: &DataConfig,
    class_names: &[String],
    score_threshold: f64,
) -> Result<Vec<PixelDetection>> {
    let (canvas, _, lb) = prepare(img, &[], data);
    let dets = predict(model, store, &canvas, score_threshold, 100)?;
    Ok(dets.iter().map(|d| to_pixels(d, &lb, img.width, img.height, class_names)).collect())
}

fn to_pixels(d: &Detection, lb: &Letterbox, w: usize, h: usize, class_names: &[String]) -> PixelDetection {
    let [x1, y1, x2, y2] = lb.to_pixel_xyxy(d.bbox);
    let (w, h) = (w as f64, h as f64);
    PixelDetection {
        class_id: d.class_id,
        class_name: class_names.get(d.class_id).cloned().unwrap_or_else(|| d.class_id.to_string()),
        score: d.score,
        bbox: [x1.clamp(0.0, w), y1.clamp(0.0, h), x2.clamp(0.0, w), y2.clamp(0.0, h)],
    }
}

/// Ground truth of dataset member `i` as pixel xyxy boxes.
pub fn ground_truth(ds: &Dataset, i: usize) -> Vec<LabeledBox> {
    ds.index
        .objects(ds.members[i])
        .into_iter()
        .map(|(class_id, [x, y, w, h])| LabeledBox { class_id, bbox: [x, y, x + w, y + h] })
        .collect()
}

/// Runs the model over every member of `ds` and scores the detections.
pub fn evaluate_model(model: &Detector, store: &ParamStore, ds: &Dataset, cfg: &EvalConfig) -> Result<(EvalReport, Vec<ImageEval>)> {
    let mut images = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let s = ds.sample(i, false)?;
        let rec = &ds.index.file.images[ds.members[i]];
        let dets = predict(model, store, &s.image, 0.0, cfg.max_dets)?;
        let dets = dets
            .iter()
            .map(|d| {
                let p = to_pixels(d, &s.letterbox, rec.width, rec.height, ds.class_names());
                ScoredBox { class_id: p.class_id, score: p.score, bbox: p.bbox }
            })
            .collect();
        images.push(ImageEval { dets, gts: ground_truth(ds, i) });
    }
    Ok((evaluate(&images, ds.class_names(), cfg)?, images))
}

/// Rebuilds the detector described by a checkpoint and loads its weights.
pub fn load_detector(ck: &Checkpoint) -> Result<(Detector, ParamStore)> {
    let (model, mut store) = Detector::new(&ck.config.model, ck.config.seed)?;
    ck.restore_into(&mut store)?;
    Ok((model, store))
}

/// One entry of a COCO-style results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]` in source pixels.
    pub bbox: Box4,
    pub score: f64,
}

pub fn read_detection_records(path: &std::path::Path) -> Result<Vec<DetectionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(&text, path)
}

/// Pairs externally produced detections with the ground truth of every member of `ds`.
/// Images without detections count as empty; unknown image or category ids are errors.
pub fn images_from_records(ds: &Dataset, records: &[DetectionRecord]) -> Result<Vec<ImageEval>> {
    let mut images: Vec<ImageEval> = (0..ds.len()).map(|i| ImageEval { dets: Vec::new(), gts: ground_truth(ds, i) }).collect();
    for (n, r) in records.iter().enumerate() {
        let slot = ds
            .members
            .iter()
            .position(|&m| ds.index.file.images[m].id == r.image_id)
            .ok_or_else(|| Error::Validation(format!("detection {n}: image_id {} is not in the dataset", r.image_id)))?;
        let class_id = ds
            .index
            .class_of(r.category_id)
            .ok_or_else(|| Error::Validation(format!("detection {n}: unknown category_id {}", r.category_id)))?;
        if !(r.score.is_finite() && r.bbox.iter().all(|v| v.is_finite())) {
            return Err(Error::Validation(format!("detection {n}: non-finite score or bbox")));
        }
        let [x, y, w, h] = r.bbox;
        images[slot].dets.push(ScoredBox { class_id, score: r.score, bbox: [x, y, x + w, y + h] });
    }
    Ok(images)
}
