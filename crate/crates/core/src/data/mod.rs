//! Keystroke ingestion, feature extraction, subject splits and synthetic data.

mod features;
mod raw;
mod split;
mod synth;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use features::{
    extract_features, features_from_timed, format_g9, pad_or_slice, read_features, write_features, FeatureSequence,
    TimedKey, DEFAULT_SEQ_LEN, FEATURES,
};
pub use raw::{parse_raw_log, write_raw_log, ColumnSchema, ParsedLog};
pub use split::{read_subject_list, split_subjects, DatasetSplit, SplitSizes};
pub use synth::{generate_synthetic, sample_session, SyntheticData, SyntheticProfile};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawKeystrokeEvent {
    pub key_code: u8,
    /// Milliseconds.
    pub press_time: i64,
    /// Milliseconds.
    pub release_time: i64,
}

impl RawKeystrokeEvent {
    pub fn new(key_code: u8, press_time: i64, release_time: i64) -> Result<Self> {
        if release_time < press_time {
            return Err(Error::Contract(format!(
                "release {release_time} ms precedes press {press_time} ms"
            )));
        }
        Ok(RawKeystrokeEvent {
            key_code,
            press_time,
            release_time,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub subject_id: String,
    pub session_id: String,
    pub events: Vec<RawKeystrokeEvent>,
}

impl Session {
    /// Builds a session, stable-sorting events by press time.
    pub fn new(
        subject_id: impl Into<String>,
        session_id: impl Into<String>,
        mut events: Vec<RawKeystrokeEvent>,
    ) -> Result<Self> {
        if events.is_empty() {
            return Err(Error::Contract("session has no events".into()));
        }
        events.sort_by_key(|e| e.press_time);
        Ok(Session {
            subject_id: subject_id.into(),
            session_id: session_id.into(),
            events,
        })
    }
}

/// Numeric order when both ids are integers, lexicographic otherwise.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        _ => a.cmp(b),
    }
}

/// Sessions of one subject in canonical (natural session-id) order.
#[derive(Clone, Debug)]
pub struct SubjectSessions {
    pub subject_id: String,
    pub sessions: Vec<FeatureSequence>,
}

/// Groups feature sequences by subject; subjects and sessions in natural order.
pub fn group_by_subject(seqs: Vec<FeatureSequence>) -> Vec<SubjectSessions> {
    let mut map: BTreeMap<String, Vec<FeatureSequence>> = BTreeMap::new();
    for s in seqs {
        map.entry(s.subject_id.clone()).or_default().push(s);
    }
    let mut out: Vec<SubjectSessions> = map
        .into_iter()
        .map(|(subject_id, mut sessions)| {
            sessions.sort_by(|a, b| natural_cmp(&a.session_id, &b.session_id));
            SubjectSessions {
                subject_id,
                sessions,
            }
        })
        .collect();
    out.sort_by(|a, b| natural_cmp(&a.subject_id, &b.subject_id));
    out
}

/// The subjects named in `ids`, in the order given.
pub fn select_subjects(all: &[SubjectSessions], ids: &[String]) -> Result<Vec<SubjectSessions>> {
    ids.iter()
        .map(|id| {
            all.iter()
                .find(|s| &s.subject_id == id)
                .cloned()
                .ok_or_else(|| Error::Sizing(format!("subject {id} has no sessions in the data")))
        })
        .collect()
}

/// Dataset-level metadata stored next to the processed features.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seq_len: usize,
    pub num_sessions: usize,
    pub num_subjects: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub split: Option<DatasetSplit>,
    #[serde(default)]
    pub profiles: Vec<SyntheticProfile>,
}

impl Manifest {
    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
