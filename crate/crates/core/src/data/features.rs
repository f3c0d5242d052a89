use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use super::Session;
use crate::error::{Error, Result};

/// Column order: hold, inter-key, press and release latency, then key code.
pub const FEATURES: usize = 5;
pub const DEFAULT_SEQ_LEN: usize = 50;

/// Fixed-length model input for one session.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub subject_id: String,
    pub session_id: String,
    /// `seq_len × 5`, row-major.
    pub values: Vec<f32>,
    pub seq_len: usize,
    pub true_length: usize,
}

impl FeatureSequence {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * FEATURES..(i + 1) * FEATURES]
    }
}

/// Per-keystroke timing features in seconds; see [`FEATURES`] for column order.
///
/// Successor-dependent columns of the last event are zero. Negative
/// inter-key latencies (key rollover) are kept.
pub fn extract_features(session: &Session, seq_len: usize) -> Result<FeatureSequence> {
    if session.events.is_empty() {
        return Err(Error::Contract(format!(
            "session {}/{} has no events",
            session.subject_id, session.session_id
        )));
    }
    let timed: Vec<TimedKey> = session
        .events
        .iter()
        .map(|e| TimedKey {
            key_code: e.key_code,
            press_ms: e.press_time as f64,
            release_ms: e.release_time as f64,
        })
        .collect();
    features_from_timed(&timed, seq_len, &session.subject_id, &session.session_id)
}

/// A key press with (possibly fractional) millisecond timestamps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimedKey {
    pub key_code: u8,
    pub press_ms: f64,
    pub release_ms: f64,
}

/// [`extract_features`] for events already in press order.
pub fn features_from_timed(events: &[TimedKey], seq_len: usize, subject_id: &str, session_id: &str) -> Result<FeatureSequence> {
    let secs = |ms: f64| ms / 1000.0;
    let rows: Vec<[f64; FEATURES]> = events
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let hl = secs(e.release_ms - e.press_ms);
            let key = f64::from(e.key_code) / 255.0;
            match events.get(i + 1) {
                Some(n) => [
                    hl,
                    secs(n.press_ms - e.release_ms),
                    secs(n.press_ms - e.press_ms),
                    secs(n.release_ms - e.release_ms),
                    key,
                ],
                None => [hl, 0.0, 0.0, 0.0, key],
            }
        })
        .collect();
    pad_or_slice(&rows, seq_len, subject_id, session_id)
}

/// Keeps the first `seq_len` rows, or appends zero rows up to `seq_len`.
pub fn pad_or_slice(
    rows: &[[f64; FEATURES]],
    seq_len: usize,
    subject_id: &str,
    session_id: &str,
) -> Result<FeatureSequence> {
    if seq_len == 0 {
        return Err(Error::Contract("sequence length must be at least 1".into()));
    }
    if rows.is_empty() {
        return Err(Error::Contract("cannot pad an empty feature matrix".into()));
    }
    let true_length = rows.len().min(seq_len);
    let mut values = vec![0.0f32; seq_len * FEATURES];
    for (i, row) in rows.iter().take(true_length).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            values[i * FEATURES + j] = v as f32;
        }
    }
    Ok(FeatureSequence {
        subject_id: subject_id.to_string(),
        session_id: session_id.to_string(),
        values,
        seq_len,
        true_length,
    })
}

/// C `printf("%.9g")` formatting; enough digits to round-trip any `f32`.
pub fn format_g9(v: f64) -> String {
    const PRECISION: i32 = 9;
    if v == 0.0 {
        return if v.is_sign_negative() { "-0" } else { "0" }.to_string();
    }
    let sci = format!("{:.*e}", (PRECISION - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if exp < -4 || exp >= PRECISION {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (PRECISION - 1 - exp) as usize;
        strip_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn encode_line(fs: &FeatureSequence) -> Result<String> {
    let mut line = String::with_capacity(fs.values.len() * 12 + 64);
    line.push_str("{\"subject_id\":");
    line.push_str(&serde_json::to_string(&fs.subject_id)?);
    line.push_str(",\"session_id\":");
    line.push_str(&serde_json::to_string(&fs.session_id)?);
    let _ = write!(line, ",\"true_length\":{},\"values\":[", fs.true_length);
    for (i, v) in fs.values.iter().enumerate() {
        if i > 0 {
            line.push(',');
        }
        line.push_str(&format_g9(f64::from(*v)));
    }
    line.push_str("]}");
    Ok(line)
}

#[derive(Deserialize)]
struct FeatureRecord {
    subject_id: String,
    session_id: String,
    true_length: usize,
    values: Vec<f64>,
}

/// One JSON object per line: ids, `true_length`, then `L×5` values row-major.
pub fn write_features(path: &Path, seqs: &[FeatureSequence]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for fs in seqs {
        writeln!(w, "{}", encode_line(fs)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureSequence>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FeatureRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if rec.values.is_empty() || rec.values.len() % FEATURES != 0 {
            return Err(Error::Format(format!(
                "{}:{}: {} values is not a multiple of {FEATURES}",
                path.display(),
                n + 1,
                rec.values.len()
            )));
        }
        let seq_len = rec.values.len() / FEATURES;
        if rec.true_length == 0 || rec.true_length > seq_len {
            return Err(Error::Format(format!(
                "{}:{}: true_length {} outside [1, {seq_len}]",
                path.display(),
                n + 1,
                rec.true_length
            )));
        }
        out.push(FeatureSequence {
            subject_id: rec.subject_id,
            session_id: rec.session_id,
            values: rec.values.into_iter().map(|v| v as f32).collect(),
            seq_len,
            true_length: rec.true_length,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RawKeystrokeEvent;
    use proptest::prelude::*;

    fn ev(k: u8, p: i64, r: i64) -> RawKeystrokeEvent {
        RawKeystrokeEvent::new(k, p, r).unwrap()
    }

    fn close(a: f32, b: f64) -> bool {
        (f64::from(a) - b).abs() < 1e-6
    }

    #[test]
    fn two_event_session() {
        let s = Session::new("u", "1", vec![ev(97, 0, 100), ev(98, 150, 260)]).unwrap();
        let fs = extract_features(&s, 50).unwrap();
        let want0 = [0.100, 0.050, 0.150, 0.160, 97.0 / 255.0];
        let want1 = [0.110, 0.0, 0.0, 0.0, 98.0 / 255.0];
        for j in 0..FEATURES {
            assert!(close(fs.row(0)[j], want0[j]), "row0[{j}]");
            assert!(close(fs.row(1)[j], want1[j]), "row1[{j}]");
        }
        assert_eq!(fs.true_length, 2);
    }

    #[test]
    fn single_event_is_padded() {
        let s = Session::new("u", "1", vec![ev(32, 0, 80)]).unwrap();
        let fs = extract_features(&s, 50).unwrap();
        assert!(close(fs.row(0)[0], 0.080));
        assert_eq!(&fs.row(0)[1..4], &[0.0, 0.0, 0.0]);
        assert!(close(fs.row(0)[4], 32.0 / 255.0));
        assert!(fs.values[FEATURES..].iter().all(|&v| v == 0.0));
        assert_eq!(fs.values.len(), 50 * FEATURES);
    }

    #[test]
    fn rollover_keeps_negative_inter_key_latency() {
        let s = Session::new("u", "1", vec![ev(97, 0, 120), ev(98, 90, 200)]).unwrap();
        let fs = extract_features(&s, 50).unwrap();
        assert!(close(fs.row(0)[1], -0.030));
    }

    #[test]
    fn pad_or_slice_cases() {
        let rows: Vec<[f64; FEATURES]> = (0..60).map(|i| [i as f64; FEATURES]).collect();
        let fs = pad_or_slice(&rows, 50, "a", "b").unwrap();
        assert_eq!(fs.true_length, 50);
        assert_eq!(fs.row(49)[0], 49.0);

        let fs = pad_or_slice(&rows[..3], 50, "a", "b").unwrap();
        assert_eq!(fs.true_length, 3);
        assert!(fs.values[3 * FEATURES..].iter().all(|&v| v == 0.0));

        let fs = pad_or_slice(&rows[..50], 50, "a", "b").unwrap();
        let direct: Vec<f32> = rows[..50].iter().flatten().map(|&v| v as f32).collect();
        assert_eq!(fs.values, direct);

        assert!(pad_or_slice(&[], 50, "a", "b").is_err());
    }

    #[test]
    fn g9_matches_printf() {
        // Reference strings produced by C printf("%.9g", (double)(float)x).
        let cases = [
            (0.1f32, "0.100000001"),
            (0.05, "0.0500000007"),
            (0.16, "0.159999996"),
            (97.0 / 255.0, "0.380392164"),
            (1e-5, "9.99999975e-06"),
            (123456789.0, "123456792"),
            (1234567890.0, "1.23456794e+09"),
            (-0.000123, "-0.000123000005"),
            (1e-4, "9.99999975e-05"),
            (2.5, "2.5"),
            (0.0, "0"),
        ];
        for (v, want) in cases {
            assert_eq!(format_g9(f64::from(v)), want);
        }
    }

    proptest! {
        #[test]
        fn g9_round_trips_f32(v in proptest::num::f32::NORMAL | proptest::num::f32::SUBNORMAL | proptest::num::f32::ZERO) {
            let s = format_g9(f64::from(v));
            let back: f64 = s.parse().unwrap();
            prop_assert_eq!((back as f32).to_bits(), v.to_bits());
        }

        #[test]
        fn extraction_always_yields_seq_len_rows(
            gaps in proptest::collection::vec((0i64..400, 0i64..300, 0u8..=255), 1..120),
            seq_len in 1usize..80,
        ) {
            let mut t = 0;
            let events: Vec<_> = gaps.iter().map(|&(gap, hold, key)| {
                t += gap;
                ev(key, t, t + hold)
            }).collect();
            let s = Session::new("u", "1", events).unwrap();
            let fs = extract_features(&s, seq_len).unwrap();
            prop_assert_eq!(fs.values.len(), seq_len * FEATURES);
            prop_assert!(fs.true_length >= 1 && fs.true_length <= seq_len);
            for i in 0..seq_len {
                let r = fs.row(i);
                prop_assert!(r[0] >= 0.0);
                prop_assert!((0.0..=1.0).contains(&r[4]));
                if i >= fs.true_length {
                    prop_assert!(r.iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn file_round_trip_is_value_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        let s = Session::new("sub \"x\"", "7", vec![ev(97, 0, 113), ev(98, 141, 262), ev(8, 250, 299)])
            .unwrap();
        let fs = extract_features(&s, 50).unwrap();
        write_features(&path, std::slice::from_ref(&fs)).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back, vec![fs]);
    }
}
