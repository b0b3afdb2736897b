//! Delta checkpoints: only trainable tensors and running statistics, tied
//! to a base model by a fingerprint of its frozen weights.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, JSON header,
//! then every array back to back as little-endian floats.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"BTDELTA\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub base_seed: u64,
    pub fingerprint: String,
    /// Bytes per stored value: 4 or 8.
    pub value_bytes: usize,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaCheckpoint {
    pub header: CheckpointHeader,
    /// Raw little-endian payload, one slice per header array.
    pub payload: Vec<u8>,
}

fn value_bytes<T: Scalar>() -> usize {
    std::mem::size_of::<T>()
}

fn encode<T: Scalar>(data: &[T], out: &mut Vec<u8>) {
    for &v in data {
        if value_bytes::<T>() == 4 {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        } else {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
}

fn decode<T: Scalar>(bytes: &[u8], width: usize) -> Vec<T> {
    bytes
        .chunks_exact(width)
        .map(|c| {
            if width == 4 {
                T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64)
            } else {
                T::of(f64::from_le_bytes(c.try_into().unwrap()))
            }
        })
        .collect()
}

impl DeltaCheckpoint {
    /// Captures the trainable state of `model`.
    pub fn capture<T: Scalar>(model: &Model<T>) -> Result<Self> {
        let mut arrays = Vec::new();
        let mut payload = Vec::new();
        for p in model.params().iter().filter(|p| p.trainable) {
            arrays.push(ArrayEntry {
                name: p.name.clone(),
                len: p.data.len(),
            });
            encode(p.data, &mut payload);
        }
        for b in model.buffers().iter().filter(|b| !b.frozen) {
            arrays.push(ArrayEntry {
                name: b.name.to_string(),
                len: b.data.len(),
            });
            encode(b.data, &mut payload);
        }
        Ok(Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                config: model.config.clone(),
                base_seed: model.base_seed,
                fingerprint: model.frozen_fingerprint(),
                value_bytes: value_bytes::<T>(),
                arrays,
            },
            payload,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a delta checkpoint"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        if header.value_bytes != 4 && header.value_bytes != 8 {
            return Err(bad("value width must be 4 or 8 bytes"));
        }
        let expected: usize =
            header.arrays.iter().map(|a| a.len).sum::<usize>() * header.value_bytes;
        let payload = body[hlen..].to_vec();
        if payload.len() != expected {
            return Err(Error::Checkpoint(format!(
                "payload has {} bytes, header describes {expected}",
                payload.len()
            )));
        }
        Ok(Self { header, payload })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Overwrites the trainable state of `model`. The model's frozen
    /// fingerprint and configuration must match the checkpoint.
    pub fn apply<T: Scalar>(&self, model: &mut Model<T>) -> Result<()> {
        let actual = model.frozen_fingerprint();
        if actual != self.header.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.header.fingerprint.clone(),
                actual,
            });
        }
        if model.config != self.header.config {
            return Err(Error::Checkpoint(
                "model configuration differs from the checkpoint".into(),
            ));
        }
        let w = self.header.value_bytes;
        let mut offset = 0;
        let mut arrays = std::collections::HashMap::new();
        for a in &self.header.arrays {
            let end = offset + a.len * w;
            arrays.insert(a.name.as_str(), decode::<T>(&self.payload[offset..end], w));
            offset = end;
        }
        let mut take = |name: &str, len: usize| -> Result<Vec<T>> {
            let data = arrays
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {name:?}")))?;
            if data.len() != len {
                return Err(Error::Checkpoint(format!(
                    "array {name:?} has {} values, model expects {len}",
                    data.len()
                )));
            }
            Ok(data)
        };
        let mean = take(
            "tal.norm.running_mean",
            model.weights.tal.running_mean.len(),
        )?;
        let var = take("tal.norm.running_var", model.weights.tal.running_var.len())?;
        for p in model.params_mut().into_iter().filter(|p| p.trainable) {
            *p.data = take(&p.name, p.data.len())?;
        }
        model.set_running(mean, var);
        if let Some(extra) = arrays.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected array {extra:?}")));
        }
        Ok(())
    }

    /// Rebuilds the base model from the stored seed and applies the delta.
    pub fn restore<T: Scalar>(&self) -> Result<Model<T>> {
        let mut model = Model::new(self.header.config.clone(), self.header.base_seed)?;
        self.apply(&mut model)?;
        Ok(model)
    }

    pub fn num_values(&self) -> usize {
        self.header.arrays.iter().map(|a| a.len).sum()
    }
}
