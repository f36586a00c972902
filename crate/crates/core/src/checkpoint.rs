//! Single-file parameter archive.
//!
//! Layout: 8-byte magic, u64 little-endian header length, a JSON header
//! (architecture fingerprint, free-form metadata, tensor table), then the
//! raw little-endian f32 payload the table points into.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tape::Tensor;

use crate::detector::ParamStore;
use crate::fsguard::FsGuard;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SFODCKP1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    fingerprint: String,
    metadata: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub fingerprint: String,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(params: ParamStore<f32>, fingerprint: impl Into<String>, metadata: serde_json::Value) -> Self {
        Self {
            params,
            fingerprint: fingerprint.into(),
            metadata,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut payload = Vec::new();
        for (name, t) in self.params.iter() {
            tensors.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset: payload.len(),
                len: t.numel() * 4,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            fingerprint: self.fingerprint.clone(),
            metadata: self.metadata.clone(),
            tensors,
        };
        let hjson = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + hjson.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| corrupt("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| corrupt(format!("header: {e}")))?;
        let payload = &bytes[16 + hlen..];
        let mut params = ParamStore::new();
        for e in header.tensors {
            if e.dtype != "f32" {
                return Err(corrupt(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            if e.len != numel * 4 {
                return Err(corrupt(format!("{}: length {} does not match shape {:?}", e.name, e.len, e.shape)));
            }
            let raw = payload
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| corrupt(format!("{}: payload out of range", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if params.insert(e.name.clone(), Tensor::new(e.shape, data)).is_some() {
                return Err(corrupt(format!("duplicate tensor {}", e.name)));
            }
        }
        Ok(Self {
            params,
            fingerprint: header.fingerprint,
            metadata: header.metadata,
        })
    }

    /// Writes via a temporary sibling and a rename, so readers never see a
    /// partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io_at(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io_at(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io_at(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io_at(path, e))
    }

    pub fn load(path: &Path, guard: &FsGuard) -> Result<Self> {
        Self::from_bytes(&guard.read(path)?, path)
    }

    /// Loads and checks the architecture fingerprint.
    pub fn load_verified(path: &Path, guard: &FsGuard, expected: &str) -> Result<Self> {
        let ck = Self::load(path, guard)?;
        if ck.fingerprint != expected {
            return Err(Error::Fingerprint {
                expected: expected.to_string(),
                found: ck.fingerprint,
            });
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;

    #[test]
    fn round_trip_and_fingerprint_check() {
        let cfg = DetectorConfig::default();
        let ps = ParamStore::<f32>::init_detector(&cfg, 3);
        let meta = serde_json::json!({"epoch": 2, "config_hash": "abc"});
        let ck = Checkpoint::new(ps, cfg.fingerprint(), meta);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        ck.save(&p).unwrap();
        let guard = FsGuard::new();
        assert_eq!(Checkpoint::load(&p, &guard).unwrap(), ck);
        assert!(matches!(
            Checkpoint::load_verified(&p, &guard, "0000"),
            Err(Error::Fingerprint { .. })
        ));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let p = Path::new("x.ckpt");
        assert!(Checkpoint::from_bytes(b"nope", p).is_err());
        let mut ps = ParamStore::new();
        ps.insert("a".into(), Tensor::new(vec![2], vec![1.0f32, 2.0]));
        let bytes = Checkpoint::new(ps, "fp", serde_json::Value::Null).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
    }
}
