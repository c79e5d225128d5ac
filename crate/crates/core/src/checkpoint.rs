//! Single-file checkpoint container.
//!
//! Layout: 8 magic bytes, the manifest length as a little-endian `u64`, a
//! UTF-8 JSON manifest, then every tensor as little-endian `f64` values in
//! row-major order at the offsets listed in the manifest.

use std::fs;
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ASAGANCK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    step: u64,
    config_digest: String,
    rng_state: String,
    metadata: serde_json::Value,
    payload_len: u64,
    payload_sha256: String,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus the bookkeeping needed to resume a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub step: u64,
    pub config_digest: String,
    pub rng_state: Vec<u8>,
    /// Free-form JSON, e.g. the resolved configuration.
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(step: u64, config_digest: String) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            step,
            config_digest,
            rng_state: Vec::new(),
            metadata: serde_json::Value::Null,
            tensors: Vec::new(),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::CheckpointCorrupt(format!("missing tensor {name}")))
    }

    pub fn expect_digest(&self, expected: &str) -> Result<()> {
        if self.config_digest != expected {
            return Err(Error::CheckpointDigest {
                found: self.config_digest.clone(),
                expected: expected.to_string(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            if entries.iter().any(|e: &TensorEntry| &e.name == name) {
                return Err(Error::config(format!("duplicate tensor name {name}")));
            }
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: "f64".into(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            for v in t.as_standard_layout().iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: self.format_version,
            step: self.step,
            config_digest: self.config_digest.clone(),
            rng_state: hex::encode(&self.rng_state),
            metadata: self.metadata.clone(),
            payload_len: payload.len() as u64,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::config(format!("manifest: {e}")))?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CheckpointCorrupt(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing header"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let end = 16usize
            .checked_add(usize::try_from(len).map_err(|_| corrupt("manifest length"))?)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated manifest"))?;
        let raw: serde_json::Value =
            serde_json::from_slice(&bytes[16..end]).map_err(|e| Error::CheckpointCorrupt(format!("manifest: {e}")))?;
        let version = raw
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| corrupt("manifest lacks format_version"))?;
        if version != FORMAT_VERSION as u64 {
            return Err(Error::CheckpointVersion {
                found: u32::try_from(version).unwrap_or(u32::MAX),
                expected: FORMAT_VERSION,
            });
        }
        let manifest: Manifest =
            serde_json::from_value(raw).map_err(|e| Error::CheckpointCorrupt(format!("manifest: {e}")))?;
        let payload = &bytes[end..];
        if payload.len() as u64 != manifest.payload_len {
            return Err(Error::CheckpointCorrupt(format!(
                "payload has {} bytes, manifest says {}",
                payload.len(),
                manifest.payload_len
            )));
        }
        if hex::encode(Sha256::digest(payload)) != manifest.payload_sha256 {
            return Err(corrupt("payload checksum mismatch"));
        }
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            if e.dtype != "f64" {
                return Err(Error::CheckpointCorrupt(format!("tensor {} has dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = usize::try_from(e.offset).map_err(|_| corrupt("offset"))?;
            let stop = n
                .checked_mul(8)
                .and_then(|b| start.checked_add(b))
                .filter(|&s| s <= payload.len())
                .ok_or_else(|| Error::CheckpointCorrupt(format!("tensor {} out of bounds", e.name)))?;
            let values = payload[start..stop]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::from_shape_vec(IxDyn(&e.shape), values).map_err(|err| Error::CheckpointCorrupt(err.to_string()))?;
            tensors.push((e.name, t));
        }
        Ok(Checkpoint {
            format_version: manifest.format_version,
            step: manifest.step,
            config_digest: manifest.config_digest,
            rng_state: hex::decode(&manifest.rng_state).map_err(|_| corrupt("rng state"))?,
            metadata: manifest.metadata,
            tensors,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(7, "abc".into());
        c.rng_state = vec![1, 2, 3];
        c.metadata = serde_json::json!({"k": 1});
        c.tensors.push(("a".into(), Tensor::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap()));
        c.tensors.push(("s".into(), Tensor::from_elem(IxDyn(&[]), 42.0)));
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        let a = back.tensor("a").unwrap();
        assert_eq!(a[[0, 1]].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn distinct_error_kinds() {
        let mut c = sample();
        c.format_version += 1;
        assert!(matches!(Checkpoint::from_bytes(&c.to_bytes().unwrap()), Err(Error::CheckpointVersion { .. })));
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 10, 40, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CheckpointCorrupt(_))));
        }
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::CheckpointCorrupt(_))));
        assert!(matches!(sample().expect_digest("xyz"), Err(Error::CheckpointDigest { .. })));
        assert!(sample().expect_digest("abc").is_ok());
    }
}
