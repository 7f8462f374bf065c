//! Checkpoints: a JSON manifest next to a little-endian `f32` blob.
//!
//! The manifest records the format version, the training configuration, the
//! class names and, for every tensor, its name, shape and byte offset in the
//! blob. Optimizer moments, when present, are stored as extra tensors named
//! `optimizer.m.<param>` and `optimizer.v.<param>`.

use std::path::{Path, PathBuf};

use scb_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::AdamState;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const FORMAT: &str = "scb-detr-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Number of optimisation steps taken.
    pub step: usize,
    pub config: TrainConfig,
    pub class_names: Vec<String>,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub blob_bytes: usize,
    pub tensors: Vec<TensorEntry>,
    /// Adam step counter when optimizer state is included.
    pub optimizer_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub config: TrainConfig,
    pub class_names: Vec<String>,
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<AdamState>,
}

const M_PREFIX: &str = "optimizer.m.";
const V_PREFIX: &str = "optimizer.v.";

/// Blob path belonging to a manifest path: same stem, `.bin` extension.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

impl Checkpoint {
    pub fn from_store(step: usize, config: &TrainConfig, class_names: &[String], store: &ParamStore, optimizer: Option<&AdamState>) -> Self {
        Checkpoint {
            step,
            config: config.clone(),
            class_names: class_names.to_vec(),
            params: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Copies the parameters into `store`, checking names and shapes.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let mut other = ParamStore::new();
        for (n, t) in &self.params {
            other.add(n.clone(), t.clone());
        }
        store.load_from(&other)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut blob = Vec::new();
        let mut push = |name: String, t: &Tensor<f32>| {
            tensors.push(TensorEntry { name, shape: t.shape().to_vec(), dtype: "f32".into(), offset: blob.len() });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (n, t) in &self.params {
            push(n.clone(), t);
        }
        if let Some(opt) = &self.optimizer {
            for ((n, _), m) in self.params.iter().zip(&opt.m) {
                push(format!("{M_PREFIX}{n}"), m);
            }
            for ((n, _), v) in self.params.iter().zip(&opt.v) {
                push(format!("{V_PREFIX}{n}"), v);
            }
        }
        let bpath = blob_path(path);
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            step: self.step,
            config: self.config.clone(),
            class_names: self.class_names.clone(),
            blob: bpath.file_name().expect("blob file name").to_string_lossy().into_owned(),
            blob_bytes: blob.len(),
            tensors,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&bpath, &blob).map_err(|e| Error::io(&bpath, e))?;
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises") + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_manifest(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let m: Manifest = serde_path_to_error::deserialize(de).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("manifest at {}: {}", e.path(), e.inner()),
        })?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("format {} version {} is not supported (expected {FORMAT} version {VERSION})", m.format, m.version),
            });
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m = Self::read_manifest(path)?;
        let fail = |message: String| Error::Checkpoint { path: path.to_path_buf(), message };
        let bpath = path.parent().unwrap_or(Path::new("")).join(&m.blob);
        let blob = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let expected: usize = m.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 4).sum();
        if blob.len() != m.blob_bytes || expected != m.blob_bytes {
            return Err(fail(format!(
                "blob {} is corrupt: expected {} bytes, found {}",
                bpath.display(),
                m.blob_bytes.max(expected),
                blob.len()
            )));
        }
        let mut params = Vec::new();
        let (mut ms, mut vs) = (Vec::new(), Vec::new());
        let mut names = std::collections::HashSet::new();
        for t in &m.tensors {
            if t.dtype != "f32" {
                return Err(fail(format!("tensor {} has unsupported dtype {}", t.name, t.dtype)));
            }
            if !names.insert(t.name.as_str()) {
                return Err(fail(format!("tensor {} listed twice", t.name)));
            }
            let n: usize = t.shape.iter().product();
            let bytes = blob.get(t.offset..t.offset + n * 4).ok_or_else(|| fail(format!("tensor {} lies outside the blob", t.name)))?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let tensor = Tensor::new(t.shape.clone(), data)?;
            if let Some(rest) = t.name.strip_prefix(M_PREFIX) {
                ms.push((rest.to_string(), tensor));
            } else if let Some(rest) = t.name.strip_prefix(V_PREFIX) {
                vs.push((rest.to_string(), tensor));
            } else {
                params.push((t.name.clone(), tensor));
            }
        }
        let optimizer = match m.optimizer_step {
            None => None,
            Some(step) => {
                let aligned = |xs: &[(String, Tensor<f32>)]| {
                    xs.len() == params.len() && xs.iter().zip(&params).all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
                };
                if !aligned(&ms) || !aligned(&vs) {
                    return Err(fail("optimizer moments do not line up with the parameters".into()));
                }
                Some(AdamState { step, m: ms.into_iter().map(|x| x.1).collect(), v: vs.into_iter().map(|x| x.1).collect() })
            }
        };
        Ok(Checkpoint { step: m.step, config: m.config, class_names: m.class_names, params, optimizer })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let params = vec![
            ("a.weight".to_string(), Tensor::new([2, 2], vec![1.0f32, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap()),
            ("b.bias".to_string(), Tensor::new([3], vec![0.1f32, 0.2, 0.3]).unwrap()),
        ];
        let mut opt = AdamState::new(&params.iter().map(|p| p.1.clone()).collect::<Vec<_>>());
        opt.step = 7;
        opt.m[1] = Tensor::full([3], 0.5);
        Checkpoint { step: 7, config: TrainConfig::toy(), class_names: vec!["x".into()], params, optimizer: Some(opt) }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("scb-ckpt-{}", std::process::id()));
        let p = dir.join("c.json");
        let ck = sample();
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        let bytes = std::fs::read(blob_path(&p)).unwrap();
        back.save(&p).unwrap();
        assert_eq!(std::fs::read(blob_path(&p)).unwrap(), bytes);

        std::fs::write(blob_path(&p), &bytes[..bytes.len() - 4]).unwrap();
        let e = Checkpoint::load(&p).unwrap_err().to_string();
        assert!(e.contains(&format!("expected {} bytes, found {}", bytes.len(), bytes.len() - 4)), "{e}");
        std::fs::remove_dir_all(dir).unwrap();
    }
}
