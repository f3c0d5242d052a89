//! Binary checkpoint file.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, JSON
//! header, the weight tensors as little-endian `f32` in manifest order, then
//! (if present) the Adam first and second moments in the same order, and a
//! SHA-256 digest of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::AdamState;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{shape_manifest, ModelConfig, ModelWeights, ParamSpec};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"KEYFRMR\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub weights: ModelWeights<f32>,
    pub train_config: TrainConfig,
    pub adam: Option<AdamState<f32>>,
    /// Epochs completed when this state was captured.
    pub epoch: usize,
    pub best_val_eer: Option<f64>,
    /// Global-EER threshold shipped as the verification default.
    pub global_threshold: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    manifest: Vec<ParamSpec>,
    train_config: TrainConfig,
    seed: u64,
    epoch: usize,
    best_val_eer: Option<f64>,
    global_threshold: Option<f64>,
    adam_step: Option<u64>,
}

fn push_tensors(out: &mut Vec<u8>, tensors: &[Tensor<f32>]) {
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint(format!("file ends inside {what}")))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn read_tensors(bytes: &[u8], pos: &mut usize, manifest: &[ParamSpec], what: &str) -> Result<Vec<Tensor<f32>>> {
    manifest
        .iter()
        .map(|spec| {
            let n: usize = spec.shape.iter().product();
            let raw = take(bytes, pos, n * 4, what)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::new(&spec.shape, data)
        })
        .collect()
}

impl Checkpoint {
    pub fn new(weights: ModelWeights<f32>, train_config: TrainConfig) -> Self {
        Checkpoint {
            weights,
            train_config,
            adam: None,
            epoch: 0,
            best_val_eer: None,
            global_threshold: None,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.weights.config()
    }

    /// File contents without the digest trailer.
    fn body(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            model_config: self.weights.config().clone(),
            manifest: self.weights.manifest().to_vec(),
            train_config: self.train_config.clone(),
            seed: self.train_config.seed,
            epoch: self.epoch,
            best_val_eer: self.best_val_eer,
            global_threshold: self.global_threshold,
            adam_step: self.adam.as_ref().map(|a| a.step),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 24 + 12 * self.weights.num_parameters());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        push_tensors(&mut out, self.weights.tensors());
        if let Some(a) = &self.adam {
            push_tensors(&mut out, &a.m);
            push_tensors(&mut out, &a.v);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = self.body()?;
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Hex SHA-256 trailer of the serialized checkpoint.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.body()?)))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN {
            return Err(Error::Checkpoint(format!("file too short ({} bytes)", bytes.len())));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - DIGEST_LEN);
        let found = Sha256::digest(body);
        if found.as_slice() != trailer {
            return Err(Error::Checkpoint(format!(
                "checksum mismatch: trailer {}, contents hash to {}",
                hex::encode(trailer),
                hex::encode(found)
            )));
        }
        let mut pos = 0;
        if take(body, &mut pos, MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(body, &mut pos, 4, "version")?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(take(body, &mut pos, 8, "header length")?.try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| Error::Checkpoint("header length overflow".into()))?;
        let header: Header = serde_json::from_slice(take(body, &mut pos, len, "header")?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "header format version {}, expected {FORMAT_VERSION}",
                header.format_version
            )));
        }
        let expected = shape_manifest(&header.model_config);
        if expected != header.manifest {
            let detail = expected
                .iter()
                .zip(&header.manifest)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.name, a.shape, b.name, b.shape))
                .unwrap_or_else(|| {
                    format!(
                        "expected {} tensors, found {}",
                        expected.len(),
                        header.manifest.len()
                    )
                });
            return Err(Error::Checkpoint(format!("shape manifest mismatch: {detail}")));
        }
        let tensors = read_tensors(body, &mut pos, &expected, "weights")?;
        let weights = ModelWeights::from_tensors(&header.model_config, tensors)?;
        let adam = match header.adam_step {
            Some(step) => Some(AdamState {
                step,
                m: read_tensors(body, &mut pos, &expected, "first moments")?,
                v: read_tensors(body, &mut pos, &expected, "second moments")?,
            }),
            None => None,
        };
        if pos != body.len() {
            return Err(Error::Checkpoint(format!(
                "{} unexpected bytes after tensor data",
                body.len() - pos
            )));
        }
        Ok(Checkpoint {
            weights,
            train_config: header.train_config,
            adam,
            epoch: header.epoch,
            best_val_eer: header.best_val_eer,
            global_threshold: header.global_threshold,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(d) => Error::Checkpoint(format!("{}: {d}", path.display())),
            other => other,
        })
    }

    /// Loads and requires the stored architecture to equal `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let cp = Self::load(path)?;
        if cp.config() != expected {
            let found = serde_json::to_string(cp.config())?;
            let want = serde_json::to_string(expected)?;
            return Err(Error::Checkpoint(format!(
                "{}: model config mismatch: expected {want}, found {found}",
                path.display()
            )));
        }
        Ok(cp)
    }
}

pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<()> {
    cp.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
