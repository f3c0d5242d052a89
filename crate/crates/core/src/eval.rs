//! Verification protocol: genuine/impostor scores, EER under per-subject and
//! global thresholds, DET curves and embedding export.
//!
//! Scores are distances, so a probe is accepted iff `score <= threshold`.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{format_g9, SubjectSessions};
use crate::error::{Error, Result};
use crate::model::{distance, embed_batch, Embedding, ModelWeights};

/// Sessions at the end of each subject's list used as probes.
pub const TEST_SESSIONS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdPolicy {
    Average,
    Global,
    Both,
}

impl std::str::FromStr for ThresholdPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(ThresholdPolicy::Average),
            "global" => Ok(ThresholdPolicy::Global),
            "both" => Ok(ThresholdPolicy::Both),
            other => Err(Error::Config(format!(
                "unknown threshold policy {other:?} (expected average, global or both)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub enrolment: usize,
    pub test_sessions: usize,
    pub policy: ThresholdPolicy,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            enrolment: 5,
            test_sessions: TEST_SESSIONS,
            policy: ThresholdPolicy::Both,
        }
    }
}

/// Embeddings of one subject's sessions in canonical order.
#[derive(Clone, Debug)]
pub struct SubjectEmbeddings {
    pub subject_id: String,
    pub sessions: Vec<Embedding>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    pub subject_id: String,
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer: f64,
    /// For the average policy this is the mean of the per-subject thresholds.
    pub threshold: f64,
    /// Genuine scores sit above impostor scores on average.
    pub inverted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub enrolment: usize,
    pub subjects: usize,
    pub average: Option<EerResult>,
    pub global: Option<EerResult>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Points ordered by decreasing threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetCurve {
    pub points: Vec<DetPoint>,
}

fn mean_distance(probe: &Embedding, enrolment: &[Embedding]) -> Result<f64> {
    let mut total = 0.0;
    for e in enrolment {
        total += distance(probe, e)?;
    }
    Ok(total / enrolment.len() as f64)
}

/// Scores for every subject with the first `enrolment` sessions as the
/// template and the last [`TEST_SESSIONS`] as probes.
///
/// Genuine: each test session against the subject's own template. Impostor:
/// every other subject's first test session against the template.
pub fn build_scores(subjects: &[SubjectEmbeddings], enrolment: usize) -> Result<Vec<ScoreSet>> {
    if enrolment == 0 {
        return Err(Error::Config("enrolment sessions must be at least 1".into()));
    }
    for s in subjects {
        if s.sessions.len() < enrolment + TEST_SESSIONS {
            return Err(Error::Protocol {
                subject: s.subject_id.clone(),
                detail: format!(
                    "{} sessions, need at least {} for E={enrolment}",
                    s.sessions.len(),
                    enrolment + TEST_SESSIONS
                ),
            });
        }
    }
    let impostor_probes: Vec<&Embedding> = subjects
        .iter()
        .map(|s| &s.sessions[s.sessions.len() - TEST_SESSIONS])
        .collect();

    subjects
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let template = &s.sessions[..enrolment];
            let tests = &s.sessions[s.sessions.len() - TEST_SESSIONS..];
            let genuine = tests
                .iter()
                .map(|t| mean_distance(t, template))
                .collect::<Result<Vec<_>>>()?;
            let impostor = impostor_probes
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, p)| mean_distance(p, template))
                .collect::<Result<Vec<_>>>()?;
            Ok(ScoreSet {
                subject_id: s.subject_id.clone(),
                genuine,
                impostor,
            })
        })
        .collect()
}

/// Equal error rate by exhaustive threshold sweep.
///
/// FRR(t) is the fraction of genuine scores above `t`, FAR(t) the fraction of
/// impostor scores at or below it. The chosen threshold minimises |FAR − FRR|
/// with ties going to the lower threshold; the EER is (FAR + FRR) / 2 there.
/// A midpoint between two adjacent distinct scores has the same counts as the
/// lower of the two, so only the distinct scores need to be visited.
pub fn compute_eer(genuine: &[f64], impostor: &[f64]) -> Result<EerResult> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Contract(format!(
            "EER needs genuine and impostor scores (got {} and {})",
            genuine.len(),
            impostor.len()
        )));
    }
    if genuine.iter().chain(impostor).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("score list".into()));
    }
    // (score, is_genuine)
    let mut all: Vec<(f64, bool)> = genuine
        .iter()
        .map(|&v| (v, true))
        .chain(impostor.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let ng = genuine.len() as i128;
    let ni = impostor.len() as i128;
    let mut genuine_le = 0i128;
    let mut impostor_le = 0i128;
    let mut best: Option<(i128, f64, i128, i128)> = None;
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                genuine_le += 1;
            } else {
                impostor_le += 1;
            }
            i += 1;
        }
        let rejected = ng - genuine_le;
        // |FAR − FRR| scaled by ng·ni so the comparison is exact.
        let gap = (impostor_le * ng - rejected * ni).abs();
        if best.is_none_or(|b| gap < b.0) {
            best = Some((gap, t, impostor_le, rejected));
        }
    }
    let (_, threshold, accepted, rejected) = best.expect("non-empty");
    let far = accepted as f64 / ni as f64;
    let frr = rejected as f64 / ng as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let inverted = mean(genuine) > mean(impostor);
    if inverted {
        tracing::warn!("genuine scores exceed impostor scores; check score polarity");
    }
    Ok(EerResult {
        eer: (far + frr) / 2.0,
        threshold,
        inverted,
    })
}

/// Mean of per-subject EERs.
pub fn average_eer(sets: &[ScoreSet]) -> Result<EerResult> {
    if sets.is_empty() {
        return Err(Error::Contract("average EER of zero subjects".into()));
    }
    let per: Vec<EerResult> = sets
        .iter()
        .map(|s| {
            compute_eer(&s.genuine, &s.impostor).map_err(|e| Error::Protocol {
                subject: s.subject_id.clone(),
                detail: e.to_string(),
            })
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    Ok(EerResult {
        eer: per.iter().map(|r| r.eer).sum::<f64>() / n,
        threshold: per.iter().map(|r| r.threshold).sum::<f64>() / n,
        inverted: per.iter().filter(|r| r.inverted).count() * 2 > per.len(),
    })
}

/// EER of the scores pooled over all subjects.
pub fn global_eer(sets: &[ScoreSet]) -> Result<EerResult> {
    let genuine: Vec<f64> = sets.iter().flat_map(|s| s.genuine.iter().copied()).collect();
    let impostor: Vec<f64> = sets.iter().flat_map(|s| s.impostor.iter().copied()).collect();
    compute_eer(&genuine, &impostor)
}

/// FAR/FRR at each distinct score, from the highest threshold down,
/// subsampled to at most `num_points` with both endpoints kept.
pub fn det_curve(genuine: &[f64], impostor: &[f64], num_points: usize) -> Result<DetCurve> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Contract("DET curve needs genuine and impostor scores".into()));
    }
    if num_points < 2 {
        return Err(Error::Config("a DET curve needs at least 2 points".into()));
    }
    let mut g = genuine.to_vec();
    let mut im = impostor.to_vec();
    g.sort_by(f64::total_cmp);
    im.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = g.iter().chain(&im).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();

    let all: Vec<DetPoint> = thresholds
        .iter()
        .map(|&t| {
            let accepted = im.partition_point(|&v| v <= t);
            let genuine_le = g.partition_point(|&v| v <= t);
            DetPoint {
                threshold: t,
                far: accepted as f64 / im.len() as f64,
                frr: (g.len() - genuine_le) as f64 / g.len() as f64,
            }
        })
        .collect();
    let points = if all.len() <= num_points {
        all
    } else {
        let last = all.len() - 1;
        let mut idx: Vec<usize> = (0..num_points)
            .map(|i| (i as f64 * last as f64 / (num_points - 1) as f64).round() as usize)
            .collect();
        idx.dedup();
        idx.into_iter().map(|i| all[i]).collect()
    };
    Ok(DetCurve { points })
}

/// Inference-mode embeddings of every session, grouped as the input.
pub fn embed_subjects(weights: &ModelWeights<f32>, subjects: &[SubjectSessions]) -> Result<Vec<SubjectEmbeddings>> {
    let flat: Vec<_> = subjects.iter().flat_map(|s| s.sessions.iter()).collect();
    let mut embeddings = embed_batch(weights, &flat)?.into_iter();
    Ok(subjects
        .iter()
        .map(|s| SubjectEmbeddings {
            subject_id: s.subject_id.clone(),
            sessions: embeddings.by_ref().take(s.sessions.len()).collect(),
        })
        .collect())
}

/// Score sets plus the EERs selected by `policy`.
pub fn evaluate_embeddings(
    subjects: &[SubjectEmbeddings],
    enrolment: usize,
    policy: ThresholdPolicy,
) -> Result<(Vec<ScoreSet>, EvalReport)> {
    let sets = build_scores(subjects, enrolment)?;
    let average = match policy {
        ThresholdPolicy::Average | ThresholdPolicy::Both => Some(average_eer(&sets)?),
        ThresholdPolicy::Global => None,
    };
    let global = match policy {
        ThresholdPolicy::Global | ThresholdPolicy::Both => Some(global_eer(&sets)?),
        ThresholdPolicy::Average => None,
    };
    let report = EvalReport {
        enrolment,
        subjects: subjects.len(),
        average,
        global,
    };
    Ok((sets, report))
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

#[derive(Serialize)]
struct ScoreLine<'a> {
    subject_id: &'a str,
    #[serde(rename = "type")]
    kind: &'static str,
    #[serde(rename = "E")]
    enrolment: usize,
    score: f64,
}

/// One JSON object per score.
pub fn write_scores(path: &Path, sets: &[ScoreSet], enrolment: usize) -> Result<()> {
    let mut w = create(path)?;
    for s in sets {
        let lines = s
            .genuine
            .iter()
            .map(|&v| ("genuine", v))
            .chain(s.impostor.iter().map(|&v| ("impostor", v)));
        for (kind, score) in lines {
            let line = ScoreLine {
                subject_id: &s.subject_id,
                kind,
                enrolment,
                score,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_scores`] back into genuine/impostor lists,
/// ignoring subject and E.
pub fn read_scores(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    #[derive(Deserialize)]
    struct Line {
        #[serde(rename = "type")]
        kind: String,
        score: f64,
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: Line = serde_json::from_str(raw)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        match line.kind.as_str() {
            "genuine" => genuine.push(line.score),
            "impostor" => impostor.push(line.score),
            other => {
                return Err(Error::Format(format!(
                    "{}:{}: unknown score type {other:?}",
                    path.display(),
                    n + 1
                )))
            }
        }
    }
    Ok((genuine, impostor))
}

pub fn write_det_csv(path: &Path, curve: &DetCurve) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    w.write_record(["threshold", "far", "frr"]).map_err(csv_err)?;
    for p in &curve.points {
        w.write_record([format_g9(p.threshold), format_g9(p.far), format_g9(p.frr)])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per session: subject_id, session_id, then the embedding values.
pub fn export_embeddings(path: &Path, subjects: &[SubjectSessions], embeddings: &[SubjectEmbeddings]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let width = embeddings
        .iter()
        .flat_map(|s| s.sessions.first())
        .map(Embedding::len)
        .next()
        .unwrap_or(0);
    let mut header = vec!["subject_id".to_string(), "session_id".to_string()];
    header.extend((0..width).map(|i| format!("e{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for (s, e) in subjects.iter().zip(embeddings) {
        for (fs, emb) in s.sessions.iter().zip(&e.sessions) {
            let mut row = vec![fs.subject_id.clone(), fs.session_id.clone()];
            row.extend(emb.values.iter().map(|&v| format_g9(f64::from(v))));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
