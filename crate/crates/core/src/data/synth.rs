//! Synthetic typists for desk-scale experiments.
//!
//! A subject is mostly identified by its hold-time habit (how long keys stay
//! down). Its habitual inter-key gap and key preferences differ only mildly
//! between subjects, and every session rescales all gaps by a wide tempo
//! factor, the way pauses depend on the text and the moment more than on the
//! typist. Telling subjects apart therefore means isolating the hold channel
//! from larger session-level variation in the others.

use serde::{Deserialize, Serialize};

use super::{RawKeystrokeEvent, Session};
use crate::error::{Error, Result};
use crate::rng::RngState;

/// Letters, space, backspace, shift, period and comma.
const KEYS: [u8; 31] = [
    97, 98, 99, 100, 101, 102, 103, 104, 105, 106, 107, 108, 109, 110, 111, 112, 113, 114, 115, 116,
    117, 118, 119, 120, 121, 122, 32, 8, 16, 46, 44,
];

/// Rough English letter frequencies (per mille) for [`KEYS`].
const BASE_FREQ: [f64; 31] = [
    82.0, 15.0, 28.0, 43.0, 127.0, 22.0, 20.0, 61.0, 70.0, 2.0, 8.0, 40.0, 24.0, 67.0, 75.0, 19.0,
    1.0, 60.0, 63.0, 91.0, 28.0, 10.0, 24.0, 2.0, 20.0, 1.0, 180.0, 20.0, 15.0, 10.0, 10.0,
];

const MIN_HOLD_MS: f64 = 5.0;
pub const HOLD_MEAN_RANGE_MS: (f64, f64) = (50.0, 250.0);
pub const GAP_MEAN_RANGE_MS: (f64, f64) = (200.0, 230.0);
/// Session gap multipliers lie in `[exp(-s), exp(s)]`, log-uniformly.
pub const TEMPO_SPREAD: f64 = 1.4;
/// Log-scale spread of per-subject key preferences around [`BASE_FREQ`].
const PREFERENCE_SPREAD: f64 = 0.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProfile {
    pub subject_id: String,
    pub hl_mean_ms: f64,
    pub hl_std_ms: f64,
    pub il_mean_ms: f64,
    pub il_std_ms: f64,
    pub key_codes: Vec<u8>,
    /// Sums to 1.
    pub key_weights: Vec<f64>,
    /// Log-scale standard deviation of the per-session hold multiplier.
    pub session_jitter: f64,
    /// Log-scale half-width of the per-session gap multiplier.
    pub tempo_spread: f64,
}

impl SyntheticProfile {
    pub fn random(subject_id: impl Into<String>, rng: &mut RngState) -> Self {
        let hl_mean = rng.uniform_range(HOLD_MEAN_RANGE_MS.0, HOLD_MEAN_RANGE_MS.1);
        let il_mean = rng.uniform_range(GAP_MEAN_RANGE_MS.0, GAP_MEAN_RANGE_MS.1);
        let raw: Vec<f64> = BASE_FREQ
            .iter()
            .map(|&f| f * (PREFERENCE_SPREAD * rng.normal()).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        SyntheticProfile {
            subject_id: subject_id.into(),
            hl_mean_ms: hl_mean,
            hl_std_ms: hl_mean * rng.uniform_range(0.1, 0.25),
            il_mean_ms: il_mean,
            il_std_ms: il_mean * rng.uniform_range(0.3, 0.5),
            key_codes: KEYS.to_vec(),
            key_weights: raw.iter().map(|w| w / total).collect(),
            session_jitter: rng.uniform_range(0.02, 0.06),
            tempo_spread: TEMPO_SPREAD,
        }
    }

    fn sample_key(&self, rng: &mut RngState) -> u8 {
        let u = rng.uniform();
        let mut acc = 0.0;
        for (&k, &w) in self.key_codes.iter().zip(&self.key_weights) {
            acc += w;
            if u < acc {
                return k;
            }
        }
        *self.key_codes.last().expect("non-empty key set")
    }
}

/// Draws one session of `events` keystrokes from `profile`.
pub fn sample_session(
    profile: &SyntheticProfile,
    session_id: impl Into<String>,
    events: usize,
    rng: &mut RngState,
) -> Result<Session> {
    let hl_scale = (profile.session_jitter * rng.normal()).exp();
    let tempo = (profile.tempo_spread * (2.0 * rng.uniform() - 1.0)).exp();
    let mut out = Vec::with_capacity(events);
    let mut press = rng.uniform_range(0.0, 1000.0).round() as i64;
    for _ in 0..events {
        let key = profile.sample_key(rng);
        let hold = (profile.hl_mean_ms * hl_scale + profile.hl_std_ms * rng.normal())
            .max(MIN_HOLD_MS)
            .round() as i64;
        let release = press + hold;
        out.push(RawKeystrokeEvent::new(key, press, release)?);
        let gap = (tempo * (profile.il_mean_ms + profile.il_std_ms * rng.normal())).round() as i64;
        press = (release + gap).max(press + 1);
    }
    Session::new(profile.subject_id.clone(), session_id, out)
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub sessions: Vec<Session>,
    pub profiles: Vec<SyntheticProfile>,
}

/// `num_subjects × sessions_per_subject` sessions of `events_per_session`
/// events each. Subject `i` draws from its own child stream of `rng`.
pub fn generate_synthetic(
    num_subjects: usize,
    sessions_per_subject: usize,
    events_per_session: usize,
    rng: &mut RngState,
) -> Result<SyntheticData> {
    if num_subjects == 0 || sessions_per_subject == 0 || events_per_session == 0 {
        return Err(Error::Contract("synthetic counts must all be at least 1".into()));
    }
    let base = rng.next_u64();
    let width = num_subjects.to_string().len().max(4);
    let mut sessions = Vec::with_capacity(num_subjects * sessions_per_subject);
    let mut profiles = Vec::with_capacity(num_subjects);
    for i in 0..num_subjects {
        let mut srng = RngState::derive(base, &[i as u64]);
        let profile = SyntheticProfile::random(format!("u{:0width$}", i + 1), &mut srng);
        for s in 0..sessions_per_subject {
            sessions.push(sample_session(&profile, (s + 1).to_string(), events_per_session, &mut srng)?);
        }
        profiles.push(profile);
    }
    Ok(SyntheticData { sessions, profiles })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::extract_features;

    #[test]
    fn counts_and_ordering() {
        let d = generate_synthetic(2, 15, 70, &mut RngState::new(1)).unwrap();
        assert_eq!(d.sessions.len(), 30);
        for s in &d.sessions {
            assert_eq!(s.events.len(), 70);
            assert!(s.events.windows(2).all(|w| w[0].press_time <= w[1].press_time));
            assert!(s.events.iter().all(|e| e.release_time > e.press_time));
        }
    }

    #[test]
    fn profiles_are_valid() {
        let d = generate_synthetic(20, 1, 1, &mut RngState::new(2)).unwrap();
        for p in &d.profiles {
            assert!((HOLD_MEAN_RANGE_MS.0..=HOLD_MEAN_RANGE_MS.1).contains(&p.hl_mean_ms));
            assert!((GAP_MEAN_RANGE_MS.0..=GAP_MEAN_RANGE_MS.1).contains(&p.il_mean_ms));
            assert!(p.hl_std_ms > 0.0 && p.il_std_ms > 0.0);
            assert!((p.key_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(3, 2, 10, &mut RngState::new(9)).unwrap();
        let b = generate_synthetic(3, 2, 10, &mut RngState::new(9)).unwrap();
        assert_eq!(a.sessions, b.sessions);
        assert_eq!(a.profiles, b.profiles);
    }

    #[test]
    fn mean_hold_separates_two_typists() {
        let mut rng = RngState::new(5);
        let mut slow = SyntheticProfile::random("slow", &mut rng);
        let mut fast = SyntheticProfile::random("fast", &mut rng);
        fast.hl_mean_ms = 80.0;
        fast.hl_std_ms = 0.2 * 80.0;
        slow.hl_mean_ms = 160.0;
        slow.hl_std_ms = 0.2 * 160.0;
        let threshold = (80.0 + 160.0) / 2.0 / 1000.0;
        for i in 0..15 {
            for (p, is_slow) in [(&fast, false), (&slow, true)] {
                let s = sample_session(p, i.to_string(), 70, &mut rng).unwrap();
                let fs = extract_features(&s, 50).unwrap();
                let mean_hl: f64 =
                    (0..fs.true_length).map(|r| f64::from(fs.row(r)[0])).sum::<f64>() / fs.true_length as f64;
                assert!(mean_hl > 0.0);
                assert_eq!(mean_hl > threshold, is_slow, "session {i} mean HL {mean_hl}");
            }
        }
    }
}
