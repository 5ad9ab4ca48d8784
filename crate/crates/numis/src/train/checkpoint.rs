//! On-disk model checkpoints.
//!
//! Layout: 4 magic bytes, u32 format version, u64-prefixed TOML metadata
//! block, u32 array count, then per array a u32-prefixed UTF-8 name, a u64
//! element count, and the f32 values as little-endian bit patterns. Round
//! trips are byte-exact.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

use super::metrics::ConfusionMatrix;

pub const MAGIC: [u8; 4] = *b"NMCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint file truncated")]
    Truncated,
    #[error("bad checkpoint metadata: {0}")]
    Metadata(String),
    #[error("checkpoint has no parameter named {0}")]
    MissingParam(String),
    #[error("parameter {name}: checkpoint has {found} values, model expects {expected}")]
    SizeMismatch { name: String, found: usize, expected: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptStats {
    pub concept: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    pub confusion: ConfusionMatrix,
}

/// Evaluation statistics for the epoch a checkpoint was saved at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointStats {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_loss: f32,
    pub concepts: Vec<ConceptStats>,
}

pub struct ModelCheckpoint {
    pub stats: CheckpointStats,
    pub params: Vec<(String, Vec<f32>)>,
}

impl ModelCheckpoint {
    /// Snapshots the current values of `params`.
    pub fn capture(stats: CheckpointStats, params: &[(String, Tensor)]) -> ModelCheckpoint {
        let params = params.iter().map(|(n, t)| (n.clone(), t.to_vec())).collect();
        ModelCheckpoint { stats, params }
    }

    /// Writes the stored values back into `params`, matching by name.
    pub fn apply(&self, params: &[(String, Tensor)]) -> Result<(), CheckpointError> {
        for (name, t) in params {
            let (_, v) = self
                .params
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| CheckpointError::MissingParam(name.clone()))?;
            if v.len() != t.numel() {
                return Err(CheckpointError::SizeMismatch {
                    name: name.clone(),
                    found: v.len(),
                    expected: t.numel(),
                });
            }
            t.set_data(v.clone());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let meta = toml::to_string(&self.stats).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let mut out = Vec::new();
        out.write_all(&MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(meta.len() as u64).to_le_bytes())?;
        out.write_all(meta.as_bytes())?;
        out.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, values) in &self.params {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(values.len() as u64).to_le_bytes())?;
            for v in values {
                out.write_all(&v.to_bits().to_le_bytes())?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelCheckpoint, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version, expected: VERSION });
        }
        let meta_len = r.u64()? as usize;
        let meta = std::str::from_utf8(r.slice(meta_len)?)
            .map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let stats: CheckpointStats =
            toml::from_str(meta).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.slice(name_len)?)
                .map_err(|e| CheckpointError::Metadata(e.to_string()))?
                .to_string();
            let n = r.u64()? as usize;
            let raw = r.slice(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_bits(u32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            params.push((name, values));
        }
        Ok(ModelCheckpoint { stats, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        Ok(fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<ModelCheckpoint, CheckpointError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        ModelCheckpoint::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn slice(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        self.slice(n)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let s = self.slice(4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let s = self.slice(8)?;
        Ok(u64::from_le_bytes(s.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{ViTConfig, ViTModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ModelCheckpoint {
        ModelCheckpoint {
            stats: CheckpointStats {
                epoch: 7,
                train_loss: 0.125,
                val_loss: 0.25,
                concepts: vec![ConceptStats {
                    concept: "ring".into(),
                    f1: Some(0.75),
                    confusion: ConfusionMatrix { tp: 3, fp: 1, tn: 4, fn_: 1 },
                }],
            },
            params: vec![
                ("a".into(), vec![1.0, -0.0, f32::MIN_POSITIVE]),
                ("b".into(), vec![0.1; 5]),
            ],
        }
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.stats, c.stats);
        // compare bit patterns, not float equality (−0.0 must survive)
        for ((na, va), (nb, vb)) in c.params.iter().zip(&back.params) {
            assert_eq!(na, nb);
            let (ba, bb): (Vec<u32>, Vec<u32>) = (
                va.iter().map(|v| v.to_bits()).collect(),
                vb.iter().map(|v| v.to_bits()).collect(),
            );
            assert_eq!(ba, bb);
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_is_detected_everywhere() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 3, 6, 12, bytes.len() / 2, bytes.len() - 1] {
            let r = ModelCheckpoint::from_bytes(&bytes[..cut]);
            assert!(r.is_err(), "cut at {} accepted", cut);
        }
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(ModelCheckpoint::from_bytes(&bytes), Err(CheckpointError::BadMagic)));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 99;
        assert!(matches!(
            ModelCheckpoint::from_bytes(&bytes),
            Err(CheckpointError::Version { found: 99, .. })
        ));
    }

    #[test]
    fn model_logits_identical_after_save_and_load() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = ViTModel::new(ViTConfig::tiny(2), &mut rng).unwrap();
        let img = image::GrayImage::from_fn(32, 32, |x, y| image::Luma([((x * 7 + y * 3) % 251) as u8]));
        let before = model.forward(&img).unwrap().to_vec();

        let stats = CheckpointStats { epoch: 0, train_loss: 0.0, val_loss: 0.0, concepts: vec![] };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ModelCheckpoint::capture(stats, &model.parameters()).save(&path).unwrap();

        // scramble, then restore from disk
        for (_, p) in model.parameters() {
            p.set_data(vec![0.5; p.numel()]);
        }
        ModelCheckpoint::load(&path).unwrap().apply(&model.parameters()).unwrap();
        let after = model.forward(&img).unwrap().to_vec();
        assert_eq!(before, after);
    }

    #[test]
    fn apply_reports_missing_and_misshapen_params() {
        let t = Tensor::param(&[2], vec![0.0, 0.0]).unwrap();
        let params = vec![("w".to_string(), t)];
        let mut c = sample();
        assert!(matches!(c.apply(&params), Err(CheckpointError::MissingParam(_))));
        c.params = vec![("w".into(), vec![1.0, 2.0, 3.0])];
        assert!(matches!(c.apply(&params), Err(CheckpointError::SizeMismatch { .. })));
    }
}
