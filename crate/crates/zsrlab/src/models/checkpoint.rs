//! Checkpoint file format: length-prefixed JSON header describing the
//! architecture and tensor manifest, followed by a little-endian f32 payload.

use serde::{Deserialize, Serialize};
use std::path::Path;

use super::{EncoderConfig, NamedTensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// "token" or "pixel" when a prompt is present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dict_classes: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: EncoderConfig,
    #[serde(default)]
    meta: CheckpointMeta,
    manifest: Vec<ManifestEntry>,
}

/// In-memory checkpoint: architecture + all named tensors (encoder, and any
/// prompt/head/dictionary tensors, distinguished by name prefix).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: EncoderConfig,
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for t in &self.tensors {
            manifest.push(ManifestEntry { name: t.name.clone(), shape: t.shape.clone(), offset });
            offset += t.numel();
        }
        let header = serde_json::to_vec(&Header { arch: self.arch, meta: self.meta.clone(), manifest })?;
        let mut out = Vec::with_capacity(8 + header.len() + offset * 4);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::invalid("checkpoint: truncated length prefix"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        if bytes.len() < 8 + hlen {
            return Err(Error::invalid("checkpoint: truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[8..8 + hlen])?;
        let payload = &bytes[8 + hlen..];
        if payload.len() % 4 != 0 {
            return Err(Error::invalid("checkpoint: payload not a multiple of 4 bytes"));
        }
        let floats = payload.len() / 4;
        let mut tensors = Vec::with_capacity(header.manifest.len());
        for e in &header.manifest {
            let n: usize = e.shape.iter().product();
            if e.shape.iter().any(|&d| d == 0) {
                return Err(Error::invalid(format!("checkpoint: zero dim in tensor {}", e.name)));
            }
            let end = e
                .offset
                .checked_add(n)
                .ok_or_else(|| Error::invalid("checkpoint: manifest offset overflow"))?;
            if end > floats {
                return Err(Error::invalid(format!(
                    "checkpoint: tensor {} spans [{}, {end}) but payload has {floats} floats",
                    e.name, e.offset
                )));
            }
            let data: Vec<f32> = payload[e.offset * 4..end * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor::new(e.name.clone(), e.shape.clone(), data));
        }
        Ok(Checkpoint { arch: header.arch, meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn tensors_with_prefix(&self, prefix: &str) -> Vec<NamedTensor> {
        self.tensors.iter().filter(|t| t.name.starts_with(prefix)).cloned().collect()
    }
}
