//! Dataset ingestion, preprocessing, deterministic batching and synthetic scenes.

pub mod coco;
pub mod image;
pub mod synth;
pub mod transform;

use std::path::{Path, PathBuf};

use scb_tensor::{RngState, Tensor};
use serde::{Deserialize, Serialize};

pub use coco::{load_annotations, CocoFile, DatasetIndex};
pub use image::{decode_image, read_image, RgbImage};
pub use synth::{synth_generate, SynthConfig};
pub use transform::{flip_box, flip_image, letterbox_image, Letterbox, Normalize};

use crate::error::{Error, Result};
use crate::loss::GroundTruth;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root; image file names resolve against it.
    pub dir: PathBuf,
    /// Annotation file, relative to `dir` unless absolute.
    pub annotations: PathBuf,
    /// Keep only images whose `split` field equals this.
    pub split: Option<String>,
    pub image_size: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub flip: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data/synth"),
            annotations: PathBuf::from("annotations.json"),
            split: None,
            image_size: 128,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            flip: false,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Validation(format!("data.image_size {} must be a positive multiple of 32", self.image_size)));
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Validation("data.mean must be finite and data.std positive".into()));
        }
        Ok(())
    }

    pub fn normalize(&self) -> Normalize {
        Normalize { mean: self.mean, std: self.std }
    }
}

/// One preprocessed image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_id: u64,
    /// Normalised `[3, S, S]` canvas.
    pub image: Tensor<f32>,
    /// Boxes in normalised canvas cxcywh.
    pub gts: Vec<GroundTruth>,
    pub letterbox: Letterbox,
    pub flipped: bool,
}

pub struct Dataset {
    pub index: DatasetIndex,
    pub root: PathBuf,
    /// Positions in `index.file.images` that make up this dataset.
    pub members: Vec<usize>,
    pub cfg: DataConfig,
}

impl Dataset {
    pub fn open(cfg: &DataConfig) -> Result<Self> {
        cfg.validate()?;
        let ann = if cfg.annotations.is_absolute() { cfg.annotations.clone() } else { cfg.dir.join(&cfg.annotations) };
        let index = load_annotations(&ann)?;
        let members: Vec<usize> = (0..index.file.images.len())
            .filter(|&i| cfg.split.is_none() || index.file.images[i].split == cfg.split)
            .collect();
        if members.is_empty() {
            return Err(Error::Validation(format!("dataset {} has no images{}", ann.display(), match &cfg.split {
                Some(s) => format!(" in split `{s}`"),
                None => String::new(),
            })));
        }
        Ok(Dataset { index, root: cfg.dir.clone(), members, cfg: cfg.clone() })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn class_names(&self) -> &[String] {
        &self.index.class_names
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.index.file.images[self.members[i]].file_name)
    }

    /// Decodes and preprocesses member `i`, mirrored when `flip`.
    pub fn sample(&self, i: usize, flip: bool) -> Result<Sample> {
        let pos = self.members[i];
        let rec = &self.index.file.images[pos];
        let path = self.image_path(i);
        let img = read_image(&path)?;
        if (img.width, img.height) != (rec.width, rec.height) {
            return Err(Error::Image {
                path,
                message: format!("decoded {}x{} but annotations say {}x{}", img.width, img.height, rec.width, rec.height),
            });
        }
        let (image, gts, letterbox) = prepare(&img, &self.index.objects(pos), &self.cfg);
        let (image, gts) = if flip {
            (flip_image(&image), gts.into_iter().map(|g| GroundTruth { bbox: flip_box(g.bbox), ..g }).collect())
        } else {
            (image, gts)
        };
        Ok(Sample { image_id: rec.id, image, gts, letterbox, flipped: flip })
    }

    /// Batch `step` of the endless epoch-shuffled stream, with per-image flips when enabled.
    pub fn batch(&self, batch_size: usize, seed: u64, step: usize) -> Result<Vec<Sample>> {
        let per_epoch = self.len().div_ceil(batch_size);
        let (epoch, b) = (step / per_epoch, step % per_epoch);
        let order = epoch_order(self.len(), seed, epoch as u64);
        let members = &order[b * batch_size..((b + 1) * batch_size).min(order.len())];
        members
            .iter()
            .map(|&i| {
                let flip = self.cfg.flip && flip_draw(seed, epoch as u64, i);
                self.sample(i, flip)
            })
            .collect()
    }
}

/// Letterboxes `img` to the configured canvas and converts pixel xywh objects.
pub fn prepare(img: &RgbImage, objects: &[(usize, [f64; 4])], cfg: &DataConfig) -> (Tensor<f32>, Vec<GroundTruth>, Letterbox) {
    let lb = Letterbox::new(img.width, img.height, cfg.image_size);
    let image = letterbox_image(img, &lb, &cfg.normalize());
    let gts = objects.iter().map(|&(class_id, b)| GroundTruth { class_id, bbox: lb.to_normalized(b) }).collect();
    (image, gts, lb)
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const FLIP_STREAM: u64 = 0x464c_4950;

/// Permutation of `0..n` for `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    RngState::new(seed).split(SHUFFLE_STREAM).split(epoch).shuffle(&mut order);
    order
}

fn flip_draw(seed: u64, epoch: u64, member: usize) -> bool {
    RngState::new(seed).split(FLIP_STREAM).split(epoch).split(member as u64).bernoulli(0.5)
}

/// Index batches of one epoch: consecutive chunks of the shuffled order.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Validation("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Validation("batch size must be >= 1".into()));
    }
    Ok(epoch_order(n, seed, epoch).chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Per-category label totals, as published for a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelManifest {
    pub categories: Vec<LabelCount>,
    pub total: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCount {
    pub name: String,
    pub count: u64,
}

impl LabelManifest {
    pub fn from_index(index: &DatasetIndex) -> Self {
        let categories: Vec<LabelCount> = index
            .class_names
            .iter()
            .zip(index.label_counts())
            .map(|(name, count)| LabelCount { name: name.clone(), count })
            .collect();
        LabelManifest { total: categories.iter().map(|c| c.count).sum(), categories }
    }

    pub fn counts(&self) -> Vec<u64> {
        self.categories.iter().map(|c| c.count).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), json_path: String::new(), message: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_images_batch_two() {
        let b = batch_iter(5, 2, 3, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert_eq!(batch_iter(5, 2, 3, 0).unwrap(), b);
        assert!(batch_iter(0, 2, 3, 0).is_err());
    }
}
