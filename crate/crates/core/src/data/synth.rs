//! Synthetic detection scenes: coloured shapes on a noisy background, drawn at
//! three size tiers with optional deliberate overlap.
//!
//! Classes come from a fixed list of shape and colour families. The first two
//! differ only in aspect ratio, a deliberately confusable pair.

use std::path::Path;

use scb_tensor::RngState;
use serde::{Deserialize, Serialize};

use super::coco::{save_annotations, AnnotationRecord, CategoryRecord, CocoFile, ImageRecord};
use super::image::RgbImage;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub images: usize,
    pub size: usize,
    pub classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Chance that an object is centred inside an earlier one.
    pub occlusion: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { images: 16, size: 128, classes: 3, min_objects: 1, max_objects: 5, occlusion: 0.25, seed: 42 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Rect,
    Disc,
    Triangle,
    Ring,
    Cross,
    Diamond,
}

struct Family {
    name: &'static str,
    shape: Shape,
    /// width / height
    aspect: f64,
    color: [u8; 3],
}

const FAMILIES: [Family; 7] = [
    Family { name: "wide_red_bar", shape: Shape::Rect, aspect: 2.0, color: [210, 50, 40] },
    Family { name: "tall_red_bar", shape: Shape::Rect, aspect: 0.5, color: [210, 50, 40] },
    Family { name: "blue_disc", shape: Shape::Disc, aspect: 1.0, color: [40, 70, 210] },
    Family { name: "green_triangle", shape: Shape::Triangle, aspect: 1.0, color: [40, 180, 60] },
    Family { name: "yellow_ring", shape: Shape::Ring, aspect: 1.0, color: [230, 210, 40] },
    Family { name: "magenta_cross", shape: Shape::Cross, aspect: 1.0, color: [200, 40, 200] },
    Family { name: "cyan_diamond", shape: Shape::Diamond, aspect: 1.0, color: [40, 200, 210] },
];

pub const MAX_CLASSES: usize = FAMILIES.len();

/// Longer side of an object as a fraction of the image side, per size tier.
const TIERS: [(f64, f64); 3] = [(0.12, 0.18), (0.24, 0.32), (0.38, 0.48)];

pub fn class_names(k: usize) -> Vec<String> {
    FAMILIES[..k].iter().map(|f| f.name.to_string()).collect()
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.size == 0 || self.size % 32 != 0 {
            return fail(format!("synth size {} must be a positive multiple of 32", self.size));
        }
        if self.classes == 0 || self.classes > MAX_CLASSES {
            return fail(format!("synth classes {} must be in 1..={MAX_CLASSES}", self.classes));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return fail(format!("synth objects range [{}, {}] is invalid", self.min_objects, self.max_objects));
        }
        if !(0.0..=1.0).contains(&self.occlusion) {
            return fail(format!("synth occlusion {} must be in [0, 1]", self.occlusion));
        }
        Ok(())
    }
}

fn covers(shape: Shape, u: f64, v: f64) -> bool {
    // (u, v) in [-1, 1]^2 relative to the object's frame
    match shape {
        Shape::Rect => true,
        Shape::Disc => u * u + v * v <= 1.0,
        Shape::Triangle => v >= -1.0 && u.abs() <= (v + 1.0) / 2.0,
        Shape::Ring => (0.45..=1.0).contains(&(u * u + v * v)),
        Shape::Cross => u.abs() <= 0.3 || v.abs() <= 0.3,
        Shape::Diamond => u.abs() + v.abs() <= 1.0,
    }
}

/// Paints one object and returns its tight pixel box `[x, y, w, h]`, if any pixel was drawn.
fn paint(img: &mut RgbImage, shape: Shape, center: (f64, f64), half: (f64, f64), color: [u8; 3]) -> Option<[f64; 4]> {
    let (cx, cy) = center;
    let (hw, hh) = half;
    let x0 = (cx - hw).floor().max(0.0) as usize;
    let y0 = (cy - hh).floor().max(0.0) as usize;
    let x1 = ((cx + hw).ceil() as usize).min(img.width);
    let y1 = ((cy + hh).ceil() as usize).min(img.height);
    let mut ext: Option<(usize, usize, usize, usize)> = None;
    for y in y0..y1 {
        for x in x0..x1 {
            let u = (x as f64 + 0.5 - cx) / hw;
            let v = (y as f64 + 0.5 - cy) / hh;
            if u.abs() <= 1.0 && v.abs() <= 1.0 && covers(shape, u, v) {
                img.put(x, y, color);
                ext = Some(match ext {
                    None => (x, y, x, y),
                    Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                });
            }
        }
    }
    ext.map(|(a, b, c, d)| [a as f64, b as f64, (c - a + 1) as f64, (d - b + 1) as f64])
}

fn overlap(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let h = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h / (a[2] * a[3] + b[2] * b[3] - w * h)
    }
}

/// Renders the dataset in memory. Image `i` is named `images/{i:06}.ppm`.
pub fn generate(cfg: &SynthConfig) -> Result<(CocoFile, Vec<RgbImage>)> {
    cfg.validate()?;
    let s = cfg.size as f64;
    let root = RngState::new(cfg.seed);
    let mut images = Vec::with_capacity(cfg.images);
    let mut file = CocoFile {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: (0..cfg.classes)
            .map(|k| CategoryRecord { id: k as u64 + 1, name: FAMILIES[k].name.to_string() })
            .collect(),
    };
    let (n_train, n_val) = (cfg.images * 8 / 10, cfg.images * 9 / 10);
    for i in 0..cfg.images {
        let mut rng = root.split(i as u64);
        let base = rng.int_range(100, 150) as u8;
        let mut img = RgbImage::new(cfg.size, cfg.size, [base; 3]);
        for px in img.data.chunks_mut(3) {
            let v = (base as i32 + rng.int_range(0, 16) as i32 - 8) as u8;
            px.fill(v);
        }
        let count = rng.int_range(cfg.min_objects, cfg.max_objects);
        let mut boxes: Vec<[f64; 4]> = Vec::new();
        for _ in 0..count {
            let class = rng.int_range(0, cfg.classes - 1);
            let fam = &FAMILIES[class];
            let (lo, hi) = TIERS[rng.int_range(0, TIERS.len() - 1)];
            let long = rng.uniform_range(lo, hi) * s;
            let (w, h) = if fam.aspect >= 1.0 { (long, long / fam.aspect) } else { (long * fam.aspect, long) };
            let occlude = !boxes.is_empty() && rng.bernoulli(cfg.occlusion);
            let pick = |rng: &mut RngState, boxes: &[[f64; 4]]| -> (f64, f64) {
                if occlude {
                    let b = boxes[rng.int_range(0, boxes.len() - 1)];
                    (b[0] + b[2] * rng.uniform_range(0.2, 0.8), b[1] + b[3] * rng.uniform_range(0.2, 0.8))
                } else {
                    (rng.uniform_range(w / 2.0, s - w / 2.0), rng.uniform_range(h / 2.0, s - h / 2.0))
                }
            };
            let mut center = pick(&mut rng, &boxes);
            if !occlude {
                for _ in 0..20 {
                    let probe = [center.0 - w / 2.0, center.1 - h / 2.0, w, h];
                    if boxes.iter().all(|&b| overlap(b, probe) < 0.05) {
                        break;
                    }
                    center = pick(&mut rng, &boxes);
                }
            }
            let jitter = |c: u8, r: &mut RngState| (c as i32 + r.int_range(0, 30) as i32 - 15).clamp(0, 255) as u8;
            let color = [jitter(fam.color[0], &mut rng), jitter(fam.color[1], &mut rng), jitter(fam.color[2], &mut rng)];
            if let Some(b) = paint(&mut img, fam.shape, center, (w / 2.0, h / 2.0), color) {
                boxes.push(b);
                file.annotations.push(AnnotationRecord {
                    id: file.annotations.len() as u64 + 1,
                    image_id: i as u64,
                    category_id: class as u64 + 1,
                    bbox: b,
                });
            }
        }
        let split = if i < n_train { "train" } else if i < n_val { "val" } else { "test" };
        file.images.push(ImageRecord {
            id: i as u64,
            file_name: format!("images/{i:06}.ppm"),
            width: cfg.size,
            height: cfg.size,
            split: Some(split.to_string()),
        });
        images.push(img);
    }
    Ok((file, images))
}

/// Writes `images/*.ppm` and `annotations.json` under `dir`.
pub fn synth_generate(cfg: &SynthConfig, dir: &Path) -> Result<CocoFile> {
    let (file, images) = generate(cfg)?;
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for (rec, img) in file.images.iter().zip(&images) {
        let p = dir.join(&rec.file_name);
        std::fs::write(&p, img.to_ppm()).map_err(|e| Error::io(&p, e))?;
    }
    save_annotations(&file, &dir.join("annotations.json"))?;
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boxes_are_tight_and_inside() {
        let (file, images) = generate(&SynthConfig { images: 6, ..Default::default() }).unwrap();
        let bg = |p: [u8; 3]| p[0] == p[1] && p[1] == p[2];
        for a in &file.annotations {
            let [x, y, w, h] = a.bbox;
            assert!(w > 0.0 && h > 0.0 && x + w <= 128.0 && y + h <= 128.0);
            let img = &images[a.image_id as usize];
            // the tight box touches painted (non-grey) pixels on its top row
            let row = y as usize;
            assert!((x as usize..(x + w) as usize).any(|c| !bg(img.pixel(c, row))));
        }
    }

    #[test]
    fn split_is_80_10_10() {
        let (file, _) = generate(&SynthConfig { images: 10, ..Default::default() }).unwrap();
        let splits: Vec<&str> = file.images.iter().map(|i| i.split.as_deref().unwrap()).collect();
        assert_eq!(splits.iter().filter(|s| **s == "train").count(), 8);
        assert_eq!(splits[8..], ["val", "test"]);
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig { size: 100, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { classes: 8, ..Default::default() }.validate().is_err());
    }
}
