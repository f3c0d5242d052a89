use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{natural_cmp, RawKeystrokeEvent, Session};
use crate::error::{Error, Result};

/// Maps the required fields onto the header names of a raw log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnSchema {
    pub subject: String,
    pub session: String,
    pub press: String,
    pub release: String,
    pub key: String,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema {
            subject: "PARTICIPANT_ID".into(),
            session: "TEST_SECTION_ID".into(),
            press: "PRESS_TIME".into(),
            release: "RELEASE_TIME".into(),
            key: "KEYCODE".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedLog {
    pub sessions: Vec<Session>,
    pub rows: usize,
    pub skipped: usize,
}

/// Rejected rows may make up at most this fraction of a file.
const MAX_MALFORMED_FRACTION: f64 = 0.10;

struct Columns {
    subject: usize,
    session: usize,
    press: usize,
    release: usize,
    key: usize,
}

fn locate(header: &csv::StringRecord, schema: &ColumnSchema) -> Result<Columns> {
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing required column {name:?}")))
    };
    Ok(Columns {
        subject: find(&schema.subject)?,
        session: find(&schema.session)?,
        press: find(&schema.press)?,
        release: find(&schema.release)?,
        key: find(&schema.key)?,
    })
}

fn parse_row(rec: &csv::StringRecord, cols: &Columns) -> Option<(String, String, RawKeystrokeEvent)> {
    let field = |i: usize| rec.get(i).map(str::trim);
    let num = |i: usize| -> Option<i64> {
        let s = field(i)?;
        s.parse::<i64>()
            .ok()
            .or_else(|| s.parse::<f64>().ok().filter(|v| v.is_finite()).map(|v| v.round() as i64))
    };
    let subject = field(cols.subject).filter(|s| !s.is_empty())?.to_string();
    let session = field(cols.session).filter(|s| !s.is_empty())?.to_string();
    let press = num(cols.press)?;
    let release = num(cols.release)?;
    let key = num(cols.key)?.clamp(0, 255) as u8;
    let event = RawKeystrokeEvent::new(key, press, release).ok()?;
    Some((subject, session, event))
}

/// Parses a delimited keystroke log (tab or comma, detected from the header).
///
/// Events are grouped per (subject, session) and stable-sorted by press time.
/// Malformed rows are skipped and counted; the call fails if they exceed 10%
/// of the data rows.
pub fn parse_raw_log(path: &Path, schema: &ColumnSchema) -> Result<ParsedLog> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let first_line = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
    let tab = first_line.contains(&b'\t');
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(if tab { b'\t' } else { b',' })
        .quoting(!tab)
        .flexible(true)
        .has_headers(true)
        .from_reader(bytes.as_slice());
    let header = reader
        .headers()
        .map_err(|e| Error::Schema(format!("{}: unreadable header: {e}", path.display())))?
        .clone();
    let cols = locate(&header, schema)?;

    let mut groups: HashMap<(String, String), Vec<RawKeystrokeEvent>> = HashMap::new();
    let mut rows = 0;
    let mut skipped = 0;
    for rec in reader.records() {
        rows += 1;
        match rec.ok().as_ref().and_then(|r| parse_row(r, &cols)) {
            Some((subject, session, event)) => groups.entry((subject, session)).or_default().push(event),
            None => skipped += 1,
        }
    }
    if rows > 0 && skipped as f64 > MAX_MALFORMED_FRACTION * rows as f64 {
        return Err(Error::Format(format!(
            "{}: {skipped} of {rows} rows malformed (limit 10%)",
            path.display()
        )));
    }
    if skipped > 0 {
        tracing::warn!(path = %path.display(), skipped, rows, "skipped malformed keystroke rows");
    }

    let mut sessions: Vec<Session> = groups
        .into_iter()
        .map(|((subject, session), events)| Session::new(subject, session, events))
        .collect::<Result<_>>()?;
    sessions.sort_by(|a, b| {
        natural_cmp(&a.subject_id, &b.subject_id).then_with(|| natural_cmp(&a.session_id, &b.session_id))
    });
    Ok(ParsedLog {
        sessions,
        rows,
        skipped,
    })
}

/// Writes sessions as a tab-separated log with the canonical header.
pub fn write_raw_log(path: &Path, sessions: &[Session]) -> Result<()> {
    let s = ColumnSchema::default();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}\t{}\t{}\t{}\t{}", s.subject, s.session, s.press, s.release, s.key).map_err(io)?;
    for sess in sessions {
        for e in &sess.events {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                sess.subject_id, sess.session_id, e.press_time, e.release_time, e.key_code
            )
            .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn two_rows_one_session() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "a.tsv",
            "PARTICIPANT_ID\tTEST_SECTION_ID\tPRESS_TIME\tRELEASE_TIME\tKEYCODE\n\
             5\t1\t1000\t1090\t72\n5\t1\t1200\t1300\t73\n",
        );
        let log = parse_raw_log(&p, &ColumnSchema::default()).unwrap();
        assert_eq!(log.sessions.len(), 1);
        assert_eq!(log.sessions[0].events.len(), 2);
        assert_eq!(log.skipped, 0);
    }

    #[test]
    fn rows_resorted_by_press_time() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "b.csv",
            "PARTICIPANT_ID,TEST_SECTION_ID,PRESS_TIME,RELEASE_TIME,KEYCODE\n\
             1,1,300,350,67\n1,1,100,150,65\n1,1,200,260,66\n",
        );
        let log = parse_raw_log(&p, &ColumnSchema::default()).unwrap();
        let keys: Vec<u8> = log.sessions[0].events.iter().map(|e| e.key_code).collect();
        assert_eq!(keys, [65, 66, 67]);
    }

    #[test]
    fn one_corrupt_row_in_a_hundred() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = String::from("PARTICIPANT_ID\tTEST_SECTION_ID\tPRESS_TIME\tRELEASE_TIME\tKEYCODE\n");
        for i in 0..100 {
            if i == 37 {
                text.push_str("1\t1\tgarbage\t12\t65\n");
            } else {
                text.push_str(&format!("1\t1\t{}\t{}\t65\n", i * 100, i * 100 + 50));
            }
        }
        let p = write(&dir, "c.tsv", &text);
        let log = parse_raw_log(&p, &ColumnSchema::default()).unwrap();
        assert_eq!(log.skipped, 1);
        assert_eq!(log.sessions[0].events.len(), 99);
    }

    #[test]
    fn too_many_corrupt_rows_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = String::from("PARTICIPANT_ID,TEST_SECTION_ID,PRESS_TIME,RELEASE_TIME,KEYCODE\n");
        for i in 0..10 {
            let release = if i < 2 { -1 } else { i * 10 + 5 };
            text.push_str(&format!("1,1,{},{release},65\n", i * 10));
        }
        let p = write(&dir, "d.csv", &text);
        assert!(matches!(parse_raw_log(&p, &ColumnSchema::default()), Err(Error::Format(_))));
    }

    #[test]
    fn missing_column_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "e.csv", "PARTICIPANT_ID,TEST_SECTION_ID,PRESS_TIME,KEYCODE\n1,1,2,3\n");
        let err = parse_raw_log(&p, &ColumnSchema::default()).unwrap_err();
        assert!(matches!(err, Error::Schema(ref m) if m.contains("RELEASE_TIME")), "{err}");
    }

    #[test]
    fn custom_schema_and_key_clamping() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "f.csv", "user,sess,down,up,code,extra\nalice,s1,10,20,300,x\n");
        let schema = ColumnSchema {
            subject: "user".into(),
            session: "sess".into(),
            press: "down".into(),
            release: "up".into(),
            key: "code".into(),
        };
        let log = parse_raw_log(&p, &schema).unwrap();
        assert_eq!(log.sessions[0].subject_id, "alice");
        assert_eq!(log.sessions[0].events[0].key_code, 255);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = parse_raw_log(Path::new("/nonexistent/x.tsv"), &ColumnSchema::default()).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn parsing_is_idempotent_and_write_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let sessions = vec![
            Session::new("2", "1", vec![RawKeystrokeEvent::new(65, 0, 80).unwrap()]).unwrap(),
            Session::new(
                "10",
                "3",
                vec![
                    RawKeystrokeEvent::new(66, 5, 70).unwrap(),
                    RawKeystrokeEvent::new(67, 60, 140).unwrap(),
                ],
            )
            .unwrap(),
        ];
        let p = dir.path().join("g.tsv");
        write_raw_log(&p, &sessions).unwrap();
        let a = parse_raw_log(&p, &ColumnSchema::default()).unwrap();
        let b = parse_raw_log(&p, &ColumnSchema::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sessions, sessions);
    }
}
