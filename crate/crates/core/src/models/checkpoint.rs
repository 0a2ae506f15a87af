//! Checkpoint container, little-endian throughout:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `FCKP` |
//! | 2 | format version (`1`) |
//! | 4 | tensor count |
//! | per tensor | u16 name length, UTF-8 name, u8 trainable, u8 rank, u64 per dimension |
//! | 8 * total | f64 values, tensors in table order |
//! | 4 | CRC-32 of everything before it |
//!
//! A JSON sidecar `<file>.json` carries [`CheckpointMeta`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::nn::{Param, ParamStore};
use super::train::TrainReport;
use super::{GarchParams, ModelError, ModelKind};
use crate::labeler::Standardizer;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FCKP";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelKind,
    pub config_hash: String,
    pub catalog_version: String,
    /// Hash of the training split the weights were fitted on.
    pub train_split_hash: String,
    pub image_dims: Option<[usize; 3]>,
    pub feat_dim: usize,
    /// Feature standardization fitted on the training split.
    pub standardizer: Option<Standardizer>,
    pub garch: Option<GarchParams>,
    pub metrics: BTreeMap<String, f64>,
    pub train_report: Option<TrainReport>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn encode(store: &ParamStore) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&CHECKPOINT_MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    b.extend_from_slice(&(store.params.len() as u32).to_le_bytes());
    for p in &store.params {
        b.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        b.extend_from_slice(p.name.as_bytes());
        b.push(p.trainable as u8);
        b.push(p.shape.len() as u8);
        for &d in &p.shape {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for p in &store.params {
        for v in &p.value {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    b
}

fn decode(bytes: &[u8]) -> Result<ParamStore, ModelError> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    if bytes.len() < 14 {
        return Err(bad("truncated file"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body).to_le_bytes() != tail {
        return Err(bad("checksum mismatch"));
    }
    if body[..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes([body[4], body[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut pos = 10;
    let mut take = |n: usize| -> Result<&[u8], ModelError> {
        let s = body.get(pos..pos + n).ok_or_else(|| bad("truncated file"))?;
        pos += n;
        Ok(s)
    };
    let count = u32::from_le_bytes(body[6..10].try_into().expect("4 bytes")) as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
        let trainable = take(1)?[0] != 0;
        let rank = take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize))
            .collect::<Result<Vec<_>, _>>()?;
        table.push((name, trainable, shape));
    }
    let mut params = Vec::with_capacity(count);
    for (name, trainable, shape) in table {
        let n: usize = shape.iter().product();
        let raw = take(n.checked_mul(8).ok_or_else(|| bad("shape overflow"))?)?;
        let value = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.push(Param { name, shape, value, trainable });
    }
    if pos != body.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(ParamStore { params })
}

/// Writes the binary checkpoint and its JSON sidecar.
pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<(), ModelError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ModelError::Io { path, source }
    };
    std::fs::write(path, encode(store)).map_err(io(path))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    std::fs::write(&side, json + "\n").map_err(io(&side))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta), ModelError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ModelError::Io { path, source }
    };
    let store = decode(&std::fs::read(path).map_err(io(path))?)?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(io(&side))?;
    let meta = serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", side.display())))?;
    Ok((store, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::nn::Dims;
    use crate::models::{Cnn, ModelData, Network};

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            model: ModelKind::NaiveCnn,
            config_hash: "abc".into(),
            catalog_version: "v".into(),
            train_split_hash: "def".into(),
            image_dims: Some([3, 8, 8]),
            feat_dim: 0,
            standardizer: None,
            garch: None,
            metrics: BTreeMap::new(),
            train_report: None,
        }
    }

    #[test]
    fn round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let d = Dims { c: 3, h: 8, w: 8 };
        let net = Cnn::new(d, 0, 9, 0.01);
        save_checkpoint(&path, &net.store, &meta()).unwrap();
        let (store, m) = load_checkpoint(&path).unwrap();
        assert_eq!(m, meta());
        let back = Cnn::from_store(store, d);
        let data = ModelData {
            image_dims: Some(d),
            images: (0..2 * d.len()).map(|i| (i % 7) as f32 / 7.0).collect(),
            labels: vec![1.0, 1.0],
            ..Default::default()
        };
        assert_eq!(net.predict(&data, &[0, 1]), back.predict(&data, &[0, 1]));
    }

    #[test]
    fn corruption_is_detected() {
        let mut store = ParamStore::default();
        store.add("w", &[2], vec![1.0, 2.0], true);
        let mut bytes = encode(&store);
        assert_eq!(decode(&bytes).unwrap(), store);
        bytes[20] ^= 1;
        assert!(decode(&bytes).is_err());
        assert!(decode(&bytes[..8]).is_err());
    }
}
