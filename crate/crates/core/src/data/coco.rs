//! COCO-subset annotation files: `images`, `annotations` and `categories`.
//! Fields outside the subset are ignored.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{parse_json, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: u64,
    pub name: String,
}

/// The on-disk document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub categories: Vec<CategoryRecord>,
}

/// A validated annotation file with categories remapped to `0..K`
/// in ascending order of their original ids.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub file: CocoFile,
    /// Original category id of each class index.
    pub category_ids: Vec<u64>,
    pub class_names: Vec<String>,
    /// Annotation indices grouped per image, in image order.
    pub per_image: Vec<Vec<usize>>,
}

impl DatasetIndex {
    pub fn from_file(file: CocoFile, path: &Path) -> Result<Self> {
        let invalid = |message: String| Error::Validation(format!("{}: {message}", path.display()));
        let mut cats: BTreeMap<u64, &str> = BTreeMap::new();
        for c in &file.categories {
            if cats.insert(c.id, &c.name).is_some() {
                return Err(invalid(format!("duplicate category id {}", c.id)));
            }
        }
        if cats.is_empty() {
            return Err(invalid("no categories".into()));
        }
        let mut image_pos = HashMap::new();
        for (i, img) in file.images.iter().enumerate() {
            if image_pos.insert(img.id, i).is_some() {
                return Err(invalid(format!("duplicate image id {}", img.id)));
            }
            if img.width == 0 || img.height == 0 {
                return Err(invalid(format!("image {} has zero size", img.id)));
            }
        }
        let mut seen = HashSet::new();
        let mut per_image = vec![Vec::new(); file.images.len()];
        for (ai, a) in file.annotations.iter().enumerate() {
            if !seen.insert(a.id) {
                return Err(invalid(format!("duplicate annotation id {}", a.id)));
            }
            let Some(&ii) = image_pos.get(&a.image_id) else {
                return Err(invalid(format!("annotation {} references unknown image id {}", a.id, a.image_id)));
            };
            if !cats.contains_key(&a.category_id) {
                return Err(invalid(format!("annotation {} references unknown category id {}", a.id, a.category_id)));
            }
            let img = &file.images[ii];
            let [x, y, w, h] = a.bbox;
            let eps = 1e-6;
            let inside = x >= -eps && y >= -eps && x + w <= img.width as f64 + eps && y + h <= img.height as f64 + eps;
            if !(a.bbox.iter().all(|v| v.is_finite()) && w > 0.0 && h > 0.0 && inside) {
                return Err(invalid(format!(
                    "annotation {} bbox {:?} is empty or outside image {} ({}x{})",
                    a.id, a.bbox, img.id, img.width, img.height
                )));
            }
            per_image[ii].push(ai);
        }
        Ok(DatasetIndex {
            category_ids: cats.keys().copied().collect(),
            class_names: cats.values().map(|s| s.to_string()).collect(),
            per_image,
            file,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.category_ids.len()
    }

    /// Class index of an original category id.
    pub fn class_of(&self, category_id: u64) -> Option<usize> {
        self.category_ids.binary_search(&category_id).ok()
    }

    /// `(class index, pixel xywh)` of every object in image `i` (position in `images`).
    pub fn objects(&self, i: usize) -> Vec<(usize, [f64; 4])> {
        self.per_image[i]
            .iter()
            .map(|&ai| {
                let a = &self.file.annotations[ai];
                (self.class_of(a.category_id).expect("validated category"), a.bbox)
            })
            .collect()
    }

    /// Number of annotations per class.
    pub fn label_counts(&self) -> Vec<u64> {
        let mut counts = vec![0; self.num_classes()];
        for a in &self.file.annotations {
            counts[self.class_of(a.category_id).expect("validated category")] += 1;
        }
        counts
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.file.images.len(), self.file.annotations.len(), self.file.categories.len())
    }
}

pub fn parse_annotations(text: &str, path: &Path) -> Result<DatasetIndex> {
    let file: CocoFile = parse_json(text, path)?;
    DatasetIndex::from_file(file, path)
}

pub fn load_annotations(path: &Path) -> Result<DatasetIndex> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path)
}

pub fn save_annotations(file: &CocoFile, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(file).expect("annotation file serialises");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "images": [{"id": 7, "file_name": "a.ppm", "width": 10, "height": 8, "license": 3}],
        "annotations": [{"id": 1, "image_id": 7, "category_id": 5, "bbox": [1, 2, 3, 4], "area": 12, "iscrowd": 0}],
        "categories": [{"id": 5, "name": "write", "supercategory": "x"}]
    }"#;

    #[test]
    fn minimal_file() {
        let idx = parse_annotations(MINIMAL, Path::new("a.json")).unwrap();
        assert_eq!(idx.counts(), (1, 1, 1));
        assert_eq!(idx.objects(0), vec![(0, [1.0, 2.0, 3.0, 4.0])]);
        assert_eq!(idx.class_of(5), Some(0));
    }

    #[test]
    fn dangling_image_is_named() {
        let text = MINIMAL.replace("\"image_id\": 7", "\"image_id\": 99");
        let e = parse_annotations(&text, Path::new("a.json")).unwrap_err();
        assert!(e.is_validation());
        assert!(e.to_string().contains("unknown image id 99"), "{e}");
    }

    #[test]
    fn bad_bbox_and_missing_key() {
        let text = MINIMAL.replace("[1, 2, 3, 4]", "[8, 2, 3, 4]");
        assert!(parse_annotations(&text, Path::new("a.json")).unwrap_err().to_string().contains("outside image"));
        let text = MINIMAL.replace("\"categories\"", "\"cats\"");
        let e = parse_annotations(&text, Path::new("a.json")).unwrap_err();
        assert!(e.to_string().contains("categories"), "{e}");
        let text = MINIMAL.replace("\"width\": 10", "\"width\": \"ten\"");
        let e = parse_annotations(&text, Path::new("a.json")).unwrap_err();
        assert!(e.to_string().contains("images[0].width"), "{e}");
    }
}
