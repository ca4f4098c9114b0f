//! Weight files: `FCN8CKPT`, u16 version, u32 manifest length, the JSON
//! manifest, then raw little-endian f32 blobs in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::labels::LulcClass;
use crate::net::{Fcn8Model, WidthMultiplier};

use super::TrainMode;

pub const MAGIC: &[u8; 8] = b"FCN8CKPT";
pub const VERSION: u16 = 1;
pub const ARCHITECTURE: &str = "fcn8-vgg16";

const HEADER_LEN: usize = 8 + 2 + 4;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o failure on {path}: {reason}")]
    IoFailure { path: String, reason: String },
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unknown checkpoint schema version {0}")]
    SchemaVersionUnknown(u16),
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("blob hash mismatch: manifest says {expected}, data hashes to {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("tensor {name}: {reason}")]
    TensorMismatch { name: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub architecture: String,
    pub width_multiplier: WidthMultiplier,
    #[serde(default)]
    pub class: Option<LulcClass>,
    #[serde(default)]
    pub mode: Option<TrainMode>,
    /// Epochs completed.
    pub epoch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    pub tensors: Vec<TensorEntry>,
    /// Hex sha256 over every blob byte in order.
    pub sha256: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Fcn8Model,
}

fn tensor_list(model: &Fcn8Model) -> Vec<(TensorEntry, &[f32])> {
    let mut out = Vec::new();
    for (name, p) in model.params() {
        out.push((
            TensorEntry { name: format!("{name}.weight"), shape: p.weight_shape.to_vec(), len: p.weight.len() },
            p.weight.as_slice(),
        ));
        out.push((
            TensorEntry { name: format!("{name}.bias"), shape: vec![p.bias.len()], len: p.bias.len() },
            p.bias.as_slice(),
        ));
    }
    out
}

fn blob_bytes(model: &Fcn8Model) -> Vec<u8> {
    tensor_list(model).iter().flat_map(|(_, data)| data.iter().flat_map(|v| v.to_le_bytes())).collect()
}

impl Checkpoint {
    /// Builds a manifest for `model` with tensor list and hash filled in.
    pub fn new(model: Fcn8Model, mut manifest: Manifest) -> Self {
        manifest.architecture = ARCHITECTURE.to_string();
        manifest.width_multiplier = model.width();
        manifest.tensors = tensor_list(&model).into_iter().map(|(e, _)| e).collect();
        manifest.sha256 = hex::encode(Sha256::digest(blob_bytes(&model)));
        Self { manifest, model }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        let blobs = blob_bytes(&self.model);
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blobs);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < HEADER_LEN {
            return Err(CheckpointError::Truncated { expected: HEADER_LEN, found: bytes.len() });
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != VERSION {
            return Err(CheckpointError::SchemaVersionUnknown(version));
        }
        let mlen = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
        let body = HEADER_LEN + mlen;
        if bytes.len() < body {
            return Err(CheckpointError::Truncated { expected: body, found: bytes.len() });
        }
        let manifest: Manifest =
            serde_json::from_slice(&bytes[HEADER_LEN..body]).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        if manifest.architecture != ARCHITECTURE {
            return Err(CheckpointError::Manifest(format!(
                "architecture `{}` is not {ARCHITECTURE}",
                manifest.architecture
            )));
        }
        let floats: usize = manifest.tensors.iter().map(|t| t.len).sum();
        let expected = body + 4 * floats;
        if bytes.len() < expected {
            return Err(CheckpointError::Truncated { expected, found: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(CheckpointError::TrailingBytes(bytes.len() - expected));
        }
        let blobs = &bytes[body..];
        let actual = hex::encode(Sha256::digest(blobs));
        if actual != manifest.sha256 {
            return Err(CheckpointError::HashMismatch { expected: manifest.sha256.clone(), actual });
        }
        let mut tensors = BTreeMap::new();
        let mut off = 0;
        for t in &manifest.tensors {
            if t.shape.iter().product::<usize>() != t.len {
                return Err(CheckpointError::TensorMismatch {
                    name: t.name.clone(),
                    reason: format!("shape {:?} does not hold {} values", t.shape, t.len),
                });
            }
            let vals: Vec<f32> = blobs[off..off + 4 * t.len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            off += 4 * t.len;
            tensors.insert(t.name.clone(), (t.shape.clone(), vals));
        }
        let mut model = Fcn8Model::zeros(manifest.width_multiplier);
        for (name, p) in model.params_mut() {
            for (suffix, shape, dst) in
                [("weight", p.weight_shape.to_vec(), &mut p.weight), ("bias", vec![p.bias.len()], &mut p.bias)]
            {
                let key = format!("{name}.{suffix}");
                let (got_shape, vals) = tensors
                    .remove(&key)
                    .ok_or_else(|| CheckpointError::TensorMismatch { name: key.clone(), reason: "missing".into() })?;
                if got_shape != shape {
                    return Err(CheckpointError::TensorMismatch {
                        name: key,
                        reason: format!("shape {got_shape:?}, model expects {shape:?}"),
                    });
                }
                *dst = vals;
            }
            p.touch();
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(CheckpointError::TensorMismatch {
                name: extra.clone(),
                reason: "not a parameter of the model".into(),
            });
        }
        Ok(Self { manifest, model })
    }

    /// Copies every tensor whose name and shape match a parameter of
    /// `model`; returns the names copied. Used to start from pretrained
    /// encoder weights.
    pub fn transfer_into(&self, model: &mut Fcn8Model) -> Vec<String> {
        type Tensors<'a> = BTreeMap<String, (&'a [usize; 4], &'a [f32], &'a [f32])>;
        let src: Tensors = self
            .model
            .params()
            .into_iter()
            .map(|(n, p)| (n, (&p.weight_shape, p.weight.as_slice(), p.bias.as_slice())))
            .collect();
        let mut copied = Vec::new();
        for (name, p) in model.params_mut() {
            if let Some((shape, w, b)) = src.get(&name) {
                if **shape == p.weight_shape && b.len() == p.bias.len() {
                    p.weight.copy_from_slice(w);
                    p.bias.copy_from_slice(b);
                    p.touch();
                    copied.push(name);
                }
            }
        }
        copied
    }

    /// Logs a warning when the checkpoint was trained for another class.
    pub fn check_class(&self, class: LulcClass) -> bool {
        match self.manifest.class {
            Some(c) if c != class => {
                log::warn!("checkpoint was trained for {c}, evaluating as {class}");
                false
            }
            _ => true,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CheckpointError {
    CheckpointError::IoFailure { path: path.display().to_string(), reason: e.to_string() }
}

pub fn save_checkpoint(cp: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, cp.to_bytes()).map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    Checkpoint::from_bytes(&fs::read(path).map_err(|e| io_err(path, e))?)
}

impl Manifest {
    /// A manifest with run metadata; tensor list and hash are filled by
    /// `Checkpoint::new`.
    pub fn describe(
        class: Option<LulcClass>,
        mode: Option<TrainMode>,
        epoch: usize,
        cfg_epochs: usize,
        learning_rate: f64,
        batch_size: usize,
        seed: u64,
    ) -> Self {
        Self {
            architecture: ARCHITECTURE.to_string(),
            width_multiplier: WidthMultiplier::FULL,
            class,
            mode,
            epoch,
            epochs: cfg_epochs,
            learning_rate,
            batch_size,
            seed,
            metrics: BTreeMap::new(),
            tensors: Vec::new(),
            sha256: String::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let m = Fcn8Model::init(9, WidthMultiplier::SIXTEENTH);
        let mut man = Manifest::describe(Some(LulcClass::Water), Some(TrainMode::Grid), 100, 100, 0.01, 8, 9);
        man.metrics.insert("final_loss".into(), 0.25);
        Checkpoint::new(m, man)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cp = sample();
        let bytes = cp.to_bytes();
        assert_eq!(&bytes[..8], b"FCN8CKPT");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.manifest, cp.manifest);
        for ((_, a), (_, b)) in back.model.params().into_iter().zip(cp.model.params()) {
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.weight), bits(&b.weight));
            assert_eq!(bits(&a.bias), bits(&b.bias));
        }
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = sample().to_bytes();
        for cut in [3, 12, 40, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::HashMismatch { .. })));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(CheckpointError::SchemaVersionUnknown(2))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(CheckpointError::BadMagic)));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(CheckpointError::TrailingBytes(1))));
    }

    #[test]
    fn files_round_trip_and_missing_file_is_io() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.fcn8");
        let cp = sample();
        save_checkpoint(&cp, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap().manifest, cp.manifest);
        assert!(matches!(load_checkpoint(dir.path().join("none")), Err(CheckpointError::IoFailure { .. })));
    }

    #[test]
    fn class_mismatch_only_warns() {
        let cp = sample();
        assert!(cp.check_class(LulcClass::Water));
        assert!(!cp.check_class(LulcClass::Forest));
    }

    #[test]
    fn transfer_copies_matching_layers() {
        let cp = sample();
        let mut same = Fcn8Model::zeros(WidthMultiplier::SIXTEENTH);
        assert_eq!(cp.transfer_into(&mut same).len(), 21);
        assert_eq!(same.params()[0].1.weight, cp.model.params()[0].1.weight);
        let mut wider = Fcn8Model::zeros(WidthMultiplier::from_divisor(8).unwrap());
        // Only layers whose shape does not depend on width match.
        let copied = cp.transfer_into(&mut wider);
        assert!(copied.iter().all(|n| n.starts_with("upscore")));
    }
}
