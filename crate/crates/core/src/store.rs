//! Persisted enrolment templates and the verification decision.
//!
//! The store is an append-only log. Each frame is `[u32 len][u32 crc32]`
//! followed by `len` bytes of JSON, all little-endian. A frame holds either
//! the full new state of one user's record or a deletion. Opening replays the
//! log in order; a torn or corrupt frame and everything after it is cut off.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::compute_eer;
use crate::model::{distance, Embedding};

/// Enrolment sessions kept per user; the oldest is evicted beyond this.
pub const MAX_ENROLMENTS: usize = 10;

const SIMPLEX_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateRecord {
    pub user_id: String,
    pub embeddings: Vec<Embedding>,
    pub created_ms: u64,
    pub updated_ms: u64,
    /// Per-user threshold; `None` defers to the service default.
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyDecision {
    pub distance: f64,
    pub threshold: f64,
    pub accepted: bool,
    pub model_checksum: String,
}

/// How [`TemplateStore::set_threshold`] picks a user's threshold.
#[derive(Clone, Debug, PartialEq)]
pub enum ThresholdSetting {
    Fixed(f64),
    /// Threshold at the EER point of these scores.
    Calibrate { genuine: Vec<f64>, impostor: Vec<f64> },
    /// Clear any per-user value.
    Default,
}

/// Mean distance from `probe` to the enrolled embeddings, compared with the
/// threshold (accept iff `distance <= threshold`).
pub fn decide(record: &TemplateRecord, probe: &Embedding, threshold: f64, model_checksum: &str) -> Result<VerifyDecision> {
    if record.embeddings.is_empty() {
        return Err(Error::Contract(format!("user {} has no enrolment", record.user_id)));
    }
    let mut total = 0.0;
    for e in &record.embeddings {
        total += distance(probe, e)?;
    }
    let d = total / record.embeddings.len() as f64;
    Ok(VerifyDecision {
        distance: d,
        threshold,
        accepted: d <= threshold,
        model_checksum: model_checksum.to_string(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum Entry {
    Put { record: TemplateRecord },
    Delete { user_id: String },
}

pub struct TemplateStore {
    path: PathBuf,
    file: File,
    records: BTreeMap<String, TemplateRecord>,
}

impl std::fmt::Debug for TemplateStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TemplateStore")
            .field("path", &self.path)
            .field("users", &self.records.len())
            .finish()
    }
}

/// Parses frames from `bytes`; returns the entries and the length of the
/// valid prefix.
fn replay(bytes: &[u8]) -> (Vec<Entry>, usize) {
    let mut entries = Vec::new();
    let mut pos = 0;
    while bytes.len() - pos >= 8 {
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        let crc = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().expect("4 bytes"));
        let start = pos + 8;
        let Some(end) = start.checked_add(len).filter(|&e| e <= bytes.len()) else {
            break;
        };
        let payload = &bytes[start..end];
        if crc32fast::hash(payload) != crc {
            break;
        }
        let Ok(entry) = serde_json::from_slice::<Entry>(payload) else {
            break;
        };
        entries.push(entry);
        pos = end;
    }
    (entries, pos)
}

impl TemplateStore {
    /// Opens or creates the log at `path`, dropping a damaged tail.
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let (entries, valid) = replay(&bytes);
        if valid < bytes.len() {
            tracing::warn!(
                path = %path.display(),
                dropped_bytes = bytes.len() - valid,
                "template store has a damaged tail; truncating"
            );
            file.set_len(valid as u64).map_err(|e| Error::io(path, e))?;
            file.seek(SeekFrom::End(0)).map_err(|e| Error::io(path, e))?;
        }
        let mut records = BTreeMap::new();
        for entry in entries {
            match entry {
                Entry::Put { record } => {
                    records.insert(record.user_id.clone(), record);
                }
                Entry::Delete { user_id } => {
                    records.remove(&user_id);
                }
            }
        }
        Ok(TemplateStore {
            path: path.to_path_buf(),
            file,
            records,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn append(&mut self, entry: &Entry) -> Result<()> {
        let payload = serde_json::to_vec(entry)?;
        let len = u32::try_from(payload.len()).map_err(|_| Error::Contract("store record too large".into()))?;
        let mut frame = Vec::with_capacity(payload.len() + 8);
        frame.extend_from_slice(&len.to_le_bytes());
        frame.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        frame.extend_from_slice(&payload);
        self.file.write_all(&frame).map_err(|e| Error::io(&self.path, e))?;
        self.file.sync_data().map_err(|e| Error::io(&self.path, e))
    }

    pub fn get(&self, user_id: &str) -> Option<&TemplateRecord> {
        self.records.get(user_id)
    }

    /// `(user_id, sessions enrolled)` in id order.
    pub fn users(&self) -> Vec<(String, usize)> {
        self.records
            .values()
            .map(|r| (r.user_id.clone(), r.embeddings.len()))
            .collect()
    }

    /// Adds one enrolment embedding; returns the user's session count.
    pub fn enroll(&mut self, user_id: &str, embedding: Embedding, now_ms: u64) -> Result<usize> {
        if user_id.is_empty() {
            return Err(Error::Contract("user_id must not be empty".into()));
        }
        if !embedding.is_simplex(SIMPLEX_TOL) {
            return Err(Error::Contract("enrolment embedding is not on the probability simplex".into()));
        }
        let mut record = self.records.get(user_id).cloned().unwrap_or_else(|| TemplateRecord {
            user_id: user_id.to_string(),
            embeddings: Vec::new(),
            created_ms: now_ms,
            updated_ms: now_ms,
            threshold: None,
        });
        if let Some(first) = record.embeddings.first() {
            if first.len() != embedding.len() {
                return Err(Error::dim(
                    "enroll",
                    format!("stored embeddings have size {}, new one {}", first.len(), embedding.len()),
                ));
            }
        }
        record.embeddings.push(embedding);
        if record.embeddings.len() > MAX_ENROLMENTS {
            let excess = record.embeddings.len() - MAX_ENROLMENTS;
            record.embeddings.drain(..excess);
        }
        record.updated_ms = now_ms;
        let count = record.embeddings.len();
        self.append(&Entry::Put { record: record.clone() })?;
        self.records.insert(user_id.to_string(), record);
        Ok(count)
    }

    /// Removes the user; `false` if it was not enrolled.
    pub fn delete(&mut self, user_id: &str) -> Result<bool> {
        if !self.records.contains_key(user_id) {
            return Ok(false);
        }
        self.append(&Entry::Delete {
            user_id: user_id.to_string(),
        })?;
        self.records.remove(user_id);
        Ok(true)
    }

    pub fn set_threshold(&mut self, user_id: &str, setting: ThresholdSetting, now_ms: u64) -> Result<&TemplateRecord> {
        let mut record = self
            .records
            .get(user_id)
            .cloned()
            .ok_or_else(|| Error::UnknownUser(user_id.to_string()))?;
        record.threshold = match setting {
            ThresholdSetting::Fixed(t) if t.is_finite() => Some(t),
            ThresholdSetting::Fixed(t) => return Err(Error::Contract(format!("threshold {t} is not finite"))),
            ThresholdSetting::Calibrate { genuine, impostor } => Some(compute_eer(&genuine, &impostor)?.threshold),
            ThresholdSetting::Default => None,
        };
        record.updated_ms = now_ms;
        self.append(&Entry::Put { record: record.clone() })?;
        self.records.insert(user_id.to_string(), record);
        Ok(&self.records[user_id])
    }

    /// Read-only decision for `user_id`; the per-user threshold wins over
    /// `default_threshold`.
    pub fn verify(
        &self,
        user_id: &str,
        probe: &Embedding,
        default_threshold: Option<f64>,
        model_checksum: &str,
    ) -> Result<VerifyDecision> {
        let record = self
            .records
            .get(user_id)
            .ok_or_else(|| Error::UnknownUser(user_id.to_string()))?;
        let threshold = record
            .threshold
            .or(default_threshold)
            .ok_or_else(|| Error::Config("no decision threshold configured".into()))?;
        decide(record, probe, threshold, model_checksum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(i: usize) -> Embedding {
        let mut v = vec![0.0; 4];
        v[i] = 1.0;
        Embedding::new(v)
    }

    #[test]
    fn cap_evicts_oldest() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = TemplateStore::open(&dir.path().join("t.log")).unwrap();
        for i in 0..12 {
            let n = s.enroll("a", onehot(i % 4), i as u64).unwrap();
            assert_eq!(n, (i + 1).min(MAX_ENROLMENTS));
        }
        let r = s.get("a").unwrap();
        assert_eq!(r.embeddings[0], onehot(2));
        assert_eq!(r.created_ms, 0);
        assert_eq!(r.updated_ms, 11);
    }

    #[test]
    fn decision_uses_mean_distance() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = TemplateStore::open(&dir.path().join("t.log")).unwrap();
        s.enroll("a", onehot(0), 0).unwrap();
        s.enroll("a", onehot(1), 0).unwrap();
        let d = s.verify("a", &onehot(0), Some(0.8), "x").unwrap();
        assert!((d.distance - 2f64.sqrt() / 2.0).abs() < 1e-12);
        assert!(d.accepted);
        let d = s.verify("a", &onehot(0), Some(0.7), "x").unwrap();
        assert!(!d.accepted);
        assert!(matches!(s.verify("b", &onehot(0), Some(1.0), "x"), Err(Error::UnknownUser(_))));
    }

    #[test]
    fn rejects_non_simplex() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = TemplateStore::open(&dir.path().join("t.log")).unwrap();
        assert!(s.enroll("a", Embedding::new(vec![0.5, 0.6]), 0).is_err());
    }
}
