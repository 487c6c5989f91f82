//! `V3DC` checkpoint files: magic, `u32` format version, `u32` header
//! length, a JSON header, then every tensor as little-endian `f32` in
//! manifest order.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Vit3dConfig, Vit3dParams};
use super::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"V3DC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint header: {0}")]
    BadHeader(String),
    #[error("checkpoint manifest does not match the model: {0}")]
    ManifestShapeMismatch(String),
    #[error("tensor {0} runs past the end of the file")]
    TruncatedBlob(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CheckpointError {
    pub fn category(&self) -> &'static str {
        match self {
            CheckpointError::BadMagic => "BadMagic",
            CheckpointError::VersionMismatch { .. } => "VersionMismatch",
            CheckpointError::BadHeader(_) => "BadHeader",
            CheckpointError::ManifestShapeMismatch(_) => "ManifestShapeMismatch",
            CheckpointError::TruncatedBlob(_) => "TruncatedBlob",
            CheckpointError::Io(_) => "IoError",
        }
    }
}

/// Saved model state. `run` holds whatever the producer needs to reproduce
/// the run (modality, training config, seed).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Vit3dConfig,
    pub params: Vit3dParams<f32>,
    pub best_val_loss: Option<f64>,
    pub epoch: usize,
    pub run: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: Vit3dConfig,
    tensors: Vec<ManifestEntry>,
    best_val_loss: Option<f64>,
    epoch: usize,
    #[serde(default)]
    run: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the tensor data.
    offset: u64,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let tensors = self
            .params
            .named()
            .into_iter()
            .map(|(name, t)| {
                let entry = ManifestEntry { name, shape: t.shape().to_vec(), offset };
                offset += 4 * t.len() as u64;
                entry
            })
            .collect();
        let header = Header { config: self.config, tensors, best_val_loss: self.best_val_loss, epoch: self.epoch, run: self.run.clone() };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.named() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let word = |at: usize| -> Result<u32, CheckpointError> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| CheckpointError::BadHeader("file ends inside the fixed header".into()))
        };
        let version = word(4)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let header_len = word(8)? as usize;
        let json = bytes
            .get(12..12 + header_len)
            .ok_or_else(|| CheckpointError::BadHeader("file ends inside the JSON header".into()))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
        let blob = &bytes[12 + header_len..];

        let mut loaded: HashMap<String, Tensor<f32>> = HashMap::new();
        let mut end = 0usize;
        for entry in &header.tensors {
            let count = entry.shape.iter().try_fold(1usize, |acc, &n| acc.checked_mul(n));
            let range = count
                .and_then(|c| c.checked_mul(4))
                .zip(usize::try_from(entry.offset).ok())
                .and_then(|(len, start)| start.checked_add(len).map(|stop| start..stop))
                .filter(|r| r.end <= blob.len())
                .ok_or_else(|| CheckpointError::TruncatedBlob(entry.name.clone()))?;
            end = end.max(range.end);
            let data = blob[range].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            loaded.insert(entry.name.clone(), Tensor::from_vec(&entry.shape, data));
        }
        if end != blob.len() {
            return Err(CheckpointError::BadHeader(format!("{} trailing bytes after the tensor data", blob.len() - end)));
        }

        header.config.validate().map_err(|e| CheckpointError::ManifestShapeMismatch(e.to_string()))?;
        let mut params = Vit3dParams::<f32>::zeros(&header.config);
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        if loaded.len() != names.len() {
            return Err(CheckpointError::ManifestShapeMismatch(format!("{} tensors stored, model has {}", loaded.len(), names.len())));
        }
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let t = loaded.remove(name).ok_or_else(|| CheckpointError::ManifestShapeMismatch(format!("tensor {name} missing")))?;
            if t.shape() != slot.shape() {
                return Err(CheckpointError::ManifestShapeMismatch(format!("{name} stored as {:?}, model expects {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        Ok(Checkpoint { config: header.config, params, best_val_loss: header.best_val_loss, epoch: header.epoch, run: header.run })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn model(&self) -> super::Vit3d<f32> {
        super::Vit3d::new(self.config, self.params.clone()).expect("decoded checkpoints are shape-checked")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let config = Vit3dConfig::tiny(Dims::new(8, 8, 8), 4, 8, 2);
        let params = Vit3dParams::init(&config, &mut ChaCha8Rng::seed_from_u64(3));
        Checkpoint { config, params, best_val_loss: Some(0.6874321987654), epoch: 4, run: serde_json::json!({"seed": 3, "modality": "FLAIR"}) }
    }

    fn raw_file(header: &serde_json::Value, blob: &[u8]) -> Vec<u8> {
        let json = serde_json::to_vec(header).unwrap();
        let mut out = b"V3DC".to_vec();
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(blob);
        out
    }

    #[test]
    fn canonical_round_trip() {
        let ck = sample();
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn save_and_load_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        loaded.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), ck.encode());
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = sample().encode();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(Checkpoint::decode(&bytes), Err(CheckpointError::BadMagic)));
        let mut bytes = sample().encode();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::decode(&bytes), Err(CheckpointError::VersionMismatch { found: 9, .. })));
    }

    #[test]
    fn short_blob_is_truncated() {
        let config = sample().config;
        let header = serde_json::json!({
            "config": config,
            "tensors": [{"name": "head.bias", "shape": [3, 3], "offset": 0}],
            "best_val_loss": null,
            "epoch": 0,
        });
        let blob: Vec<u8> = (0..5).flat_map(|i| (i as f32).to_le_bytes()).collect();
        assert!(matches!(Checkpoint::decode(&raw_file(&header, &blob)), Err(CheckpointError::TruncatedBlob(name)) if name == "head.bias"));
    }

    #[test]
    fn wrong_shapes_are_reported() {
        let config = sample().config;
        let header = serde_json::json!({
            "config": config,
            "tensors": [{"name": "head.bias", "shape": [2], "offset": 0}],
            "best_val_loss": null,
            "epoch": 0,
        });
        let blob = [0u8; 8];
        assert!(matches!(Checkpoint::decode(&raw_file(&header, &blob)), Err(CheckpointError::ManifestShapeMismatch(_))));

        let mut bytes = sample().encode();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(Checkpoint::decode(&bytes), Err(CheckpointError::TruncatedBlob(_))));
    }
}
