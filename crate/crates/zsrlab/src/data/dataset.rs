//! On-disk dataset container: JSON sidecar metadata plus raw little-endian
//! binary payloads.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub classes: Vec<String>,
    pub image_shape: [usize; 3],
    pub count: usize,
    pub dtype: String,
    pub labeled: bool,
    #[serde(default)]
    pub split: String,
}

/// In-memory dataset of [0,1] float images with optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub image_shape: [usize; 3],
    pub split: String,
    /// N × C·H·W, row-major.
    pub images: Vec<f32>,
    pub labels: Option<Vec<u32>>,
}

impl Dataset {
    pub fn image_len(&self) -> usize {
        let [c, h, w] = self.image_shape;
        c * h * w
    }

    pub fn len(&self) -> usize {
        self.images.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.image_len()..(i + 1) * self.image_len()]
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            classes: self.classes.clone(),
            image_shape: self.image_shape,
            count: self.len(),
            dtype: "f32le".to_string(),
            labeled: self.labels.is_some(),
            split: self.split.clone(),
        }
    }

    /// Retain only the listed example indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let il = self.image_len();
        let mut images = Vec::with_capacity(indices.len() * il);
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        let labels = self.labels.as_ref().map(|ls| indices.iter().map(|&i| ls[i]).collect());
        Dataset {
            classes: self.classes.clone(),
            image_shape: self.image_shape,
            split: self.split.clone(),
            images,
            labels,
        }
    }

    /// Decode a dataset from raw file contents (meta.json / images.bin /
    /// labels.bin). This is the untrusted-input entry point.
    pub fn from_parts(meta_bytes: &[u8], image_bytes: &[u8], label_bytes: Option<&[u8]>) -> Result<Dataset> {
        let meta: DatasetMeta = serde_json::from_slice(meta_bytes)?;
        if meta.dtype != "f32le" {
            return Err(Error::invalid(format!("unsupported dtype {:?}", meta.dtype)));
        }
        let [c, h, w] = meta.image_shape;
        let il = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::invalid("invalid image_shape"))?;
        let expected = meta
            .count
            .checked_mul(il)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::invalid("image payload size overflow"))?;
        if image_bytes.len() != expected {
            return Err(Error::invalid(format!(
                "images.bin has {} bytes, expected {} for count={}",
                image_bytes.len(),
                expected,
                meta.count
            )));
        }
        let images: Vec<f32> = image_bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("images.bin".into()));
        }
        let labels = match (meta.labeled, label_bytes) {
            (true, Some(lb)) => {
                if lb.len() != meta.count * 4 {
                    return Err(Error::invalid(format!(
                        "labels.bin has {} bytes, expected {}",
                        lb.len(),
                        meta.count * 4
                    )));
                }
                let ls: Vec<u32> = lb.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
                if let Some(&bad) = ls.iter().find(|&&l| l as usize >= meta.classes.len()) {
                    return Err(Error::invalid(format!("label {bad} out of range for {} classes", meta.classes.len())));
                }
                Some(ls)
            }
            (true, None) => return Err(Error::invalid("meta says labeled but labels.bin missing")),
            (false, _) => None,
        };
        Ok(Dataset { classes: meta.classes, image_shape: meta.image_shape, split: meta.split, images, labels })
    }
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&ds.meta())?)?;
    let mut buf = Vec::with_capacity(ds.images.len() * 4);
    for &v in &ds.images {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(dir.join("images.bin"), buf)?;
    if let Some(labels) = &ds.labels {
        let mut lb = Vec::with_capacity(labels.len() * 4);
        for &l in labels {
            lb.extend_from_slice(&l.to_le_bytes());
        }
        std::fs::write(dir.join("labels.bin"), lb)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta = std::fs::read(dir.join("meta.json"))?;
    let images = std::fs::read(dir.join("images.bin"))?;
    let labels_path = dir.join("labels.bin");
    let labels = if labels_path.exists() { Some(std::fs::read(labels_path)?) } else { None };
    Dataset::from_parts(&meta, &images, labels.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset {
            classes: vec!["a".into(), "b".into()],
            image_shape: [1, 1, 2],
            split: "test".into(),
            images: vec![0.25, 0.5, 0.75, 1.0],
            labels: Some(vec![0, 1]),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, loaded);
        // byte-level check too
        save_dataset(&loaded, dir.path()).unwrap();
        let again = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, again);
    }

    #[test]
    fn truncated_images_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        let p = dir.path().join("images.bin");
        let mut b = std::fs::read(&p).unwrap();
        b.truncate(b.len() - 4);
        std::fs::write(&p, b).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("expected"), "{err}");
    }

    #[test]
    fn nan_pixels_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny();
        ds.images[1] = f32::NAN;
        // bypass the in-memory invariant by writing bytes directly
        std::fs::create_dir_all(dir.path()).unwrap();
        std::fs::write(dir.path().join("meta.json"), serde_json::to_vec(&ds.meta()).unwrap()).unwrap();
        let mut buf = Vec::new();
        for &v in &ds.images {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(dir.path().join("images.bin"), buf).unwrap();
        std::fs::write(dir.path().join("labels.bin"), [0u8, 0, 0, 0, 1, 0, 0, 0]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn little_endian_golden_bytes() {
        // Hand-written 2-pixel fixture: one 1×1×2 image [0.5, 1.0].
        let meta = br#"{"classes":["a"],"image_shape":[1,1,2],"count":1,"dtype":"f32le","labeled":false,"split":""}"#;
        let images: [u8; 8] = [0x00, 0x00, 0x00, 0x3F, 0x00, 0x00, 0x80, 0x3F];
        let ds = Dataset::from_parts(meta, &images, None).unwrap();
        assert_eq!(ds.images, vec![0.5, 1.0]);
    }
}
