//! Triplet-loss training with Adam and validation-EER model selection.

mod adam;
mod checkpoint;

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};

use crate::autograd::{Graph, Var};
use crate::data::{FeatureSequence, SubjectSessions};
use crate::error::{Error, Result};
use crate::eval::{build_scores, embed_subjects, global_eer, EerResult};
use crate::model::{bind_params, embed, input_tensor, distance, Embedding, ModelConfig, ModelWeights};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

/// Streams of [`RngState::derive`] paths.
const STREAM_INIT: u64 = 1;
const STREAM_SAMPLE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

/// Triplets sharing one autograd graph.
const TRIPLETS_PER_GRAPH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Training subjects scored for the logged training EER.
    pub train_eval_subjects: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            batches_per_epoch: 29,
            batch_size: 1024,
            learning_rate: 0.001,
            margin: 1.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            train_eval_subjects: 400,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("margin {} must be non-negative", self.margin)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TripletBatch<'a> {
    pub anchors: Vec<&'a FeatureSequence>,
    pub positives: Vec<&'a FeatureSequence>,
    pub negatives: Vec<&'a FeatureSequence>,
}

impl TripletBatch<'_> {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Uniform random triplets: anchor subject among those with two or more
/// sessions, two distinct sessions of it, and one session of another subject.
pub fn sample_triplets<'a>(
    subjects: &'a [SubjectSessions],
    batch_size: usize,
    rng: &mut RngState,
) -> Result<TripletBatch<'a>> {
    let eligible: Vec<usize> = subjects
        .iter()
        .enumerate()
        .filter(|(_, s)| s.sessions.len() >= 2)
        .map(|(i, _)| i)
        .collect();
    let populated = subjects.iter().filter(|s| !s.sessions.is_empty()).count();
    if eligible.is_empty() || populated < 2 {
        return Err(Error::Contract(format!(
            "triplets need a subject with 2+ sessions and another subject; have {} subjects, {} with 2+ sessions",
            populated,
            eligible.len()
        )));
    }
    let mut batch = TripletBatch {
        anchors: Vec::with_capacity(batch_size),
        positives: Vec::with_capacity(batch_size),
        negatives: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let a = eligible[rng.below(eligible.len())];
        let sessions = &subjects[a].sessions;
        let i = rng.below(sessions.len());
        let mut j = rng.below(sessions.len() - 1);
        if j >= i {
            j += 1;
        }
        let n = loop {
            let mut n = rng.below(subjects.len() - 1);
            if n >= a {
                n += 1;
            }
            if !subjects[n].sessions.is_empty() {
                break n;
            }
        };
        let negs = &subjects[n].sessions;
        batch.anchors.push(&sessions[i]);
        batch.positives.push(&sessions[j]);
        batch.negatives.push(&negs[rng.below(negs.len())]);
    }
    Ok(batch)
}

fn graph_distance<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq)?;
    g.sqrt(s)
}

/// `max(0, ‖a − p‖ − ‖a − n‖ + margin)` on the graph.
pub fn triplet_loss<T: Real>(g: &mut Graph<T>, anchor: Var, positive: Var, negative: Var, margin: f64) -> Result<Var> {
    if g.shape(anchor) != g.shape(positive) || g.shape(anchor) != g.shape(negative) {
        return Err(Error::dim(
            "triplet_loss",
            format!(
                "embedding shapes {:?}, {:?}, {:?}",
                g.shape(anchor),
                g.shape(positive),
                g.shape(negative)
            ),
        ));
    }
    let dp = graph_distance(g, anchor, positive)?;
    let dn = graph_distance(g, anchor, negative)?;
    let gap = g.sub(dp, dn)?;
    let shifted = g.add_scalar(gap, T::from_f64(margin))?;
    g.relu(shifted)
}

/// Loss of one triplet of finished embeddings.
pub fn triplet_loss_value(anchor: &Embedding, positive: &Embedding, negative: &Embedding, margin: f64) -> Result<f64> {
    Ok((distance(anchor, positive)? - distance(anchor, negative)? + margin).max(0.0))
}

/// Mean batch loss and its gradient for every parameter.
///
/// Triplets are processed in fixed-size groups, each on its own graph, and
/// the group gradients are summed in group order, so the result does not
/// depend on how many threads run the groups.
pub fn batch_gradients(
    weights: &ModelWeights<f32>,
    batch: &TripletBatch<'_>,
    margin: f64,
    dropout_seed: (u64, &[u64]),
) -> Result<(f64, Vec<Tensor<f32>>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty triplet batch".into()));
    }
    let inv = 1.0 / batch.len() as f64;
    let groups: Vec<usize> = (0..batch.len()).step_by(TRIPLETS_PER_GRAPH).collect();
    let parts: Vec<Result<(f64, Vec<Tensor<f32>>)>> = groups
        .par_iter()
        .map(|&start| {
            let end = (start + TRIPLETS_PER_GRAPH).min(batch.len());
            let mut g = Graph::new();
            let params = bind_params(&mut g, weights, true);
            let mut losses = Vec::with_capacity(end - start);
            for t in start..end {
                let mut path = dropout_seed.1.to_vec();
                path.push(t as u64);
                let mut rng = RngState::derive(dropout_seed.0, &path);
                let mut emb = |fs: &FeatureSequence, g: &mut Graph<f32>| -> Result<Var> {
                    let x = g.constant(input_tensor(fs)?);
                    embed(g, weights, &params, x, Some(&mut rng))
                };
                let a = emb(batch.anchors[t], &mut g)?;
                let p = emb(batch.positives[t], &mut g)?;
                let n = emb(batch.negatives[t], &mut g)?;
                losses.push(triplet_loss(&mut g, a, p, n, margin)?);
            }
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = g.add(total, l)?;
            }
            let loss = g.scale(total, inv as f32)?;
            let value = f64::from(g.value(loss).data()[0]);
            let mut grads = g.backward(loss)?;
            let grads = params
                .iter()
                .zip(weights.tensors())
                .map(|(&v, w)| grads.take(v).unwrap_or_else(|| Tensor::zeros(w.shape())))
                .collect();
            Ok((value, grads))
        })
        .collect();

    let mut loss = 0.0;
    let mut total: Option<Vec<Tensor<f32>>> = None;
    for part in parts {
        let (l, grads) = part?;
        loss += l;
        match &mut total {
            Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
            None => total = Some(grads),
        }
    }
    let grads = total.expect("non-empty batch");
    if !loss.is_finite() {
        return Err(Error::NonFinite("triplet loss".into()));
    }
    for (spec, g) in weights.manifest().iter().zip(&grads) {
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", spec.name)));
        }
    }
    Ok((loss, grads))
}

/// Global EER with one enrolment session, the model-selection criterion.
pub fn selection_eer(weights: &ModelWeights<f32>, subjects: &[SubjectSessions]) -> Result<EerResult> {
    let emb = embed_subjects(weights, subjects)?;
    global_eer(&build_scores(&emb, 1)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_eer: f64,
    pub val_eer: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Written whenever the validation EER strictly improves.
    pub checkpoint_path: Option<PathBuf>,
    /// One JSON object per epoch, appended.
    pub log_path: Option<PathBuf>,
    /// Continue from this state instead of a fresh initialization.
    pub resume: Option<Checkpoint>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// State at the epoch with the lowest validation EER (the initial state if
    /// no epoch ran).
    pub best: Checkpoint,
    /// State after the final epoch.
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Runs `cfg.epochs` epochs (minus any already in `opts.resume`).
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train_subjects: &[SubjectSessions],
    validation: &[SubjectSessions],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    let mut state = match &opts.resume {
        Some(cp) => {
            if cp.config() != model {
                return Err(Error::Checkpoint("resume checkpoint has a different model config".into()));
            }
            let mut cp = cp.clone();
            cp.train_config = cfg.clone();
            if cp.adam.is_none() {
                cp.adam = Some(AdamState::new(cp.weights.tensors()));
            }
            cp
        }
        None => {
            let weights = ModelWeights::init(model, &mut RngState::derive(cfg.seed, &[STREAM_INIT]))?;
            let mut cp = Checkpoint::new(weights, cfg.clone());
            cp.adam = Some(AdamState::new(cp.weights.tensors()));
            cp
        }
    };
    let mut best = state.clone();
    let mut log = Vec::new();
    if state.epoch >= cfg.epochs {
        return Ok(TrainOutcome { best, last: state, log });
    }
    if validation.is_empty() {
        return Err(Error::Sizing("training needs at least one validation subject".into()));
    }
    let train_eval = &train_subjects[..train_subjects.len().min(cfg.train_eval_subjects)];
    let mut log_file = match &opts.log_path {
        Some(p) => Some(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?,
        ),
        None => None,
    };
    let adam_cfg = cfg.adam();

    for epoch in state.epoch + 1..=cfg.epochs {
        let started = Instant::now();
        let mut sampler = RngState::derive(cfg.seed, &[STREAM_SAMPLE, epoch as u64]);
        let mut loss_sum = 0.0;
        for b in 0..cfg.batches_per_epoch {
            let batch = sample_triplets(train_subjects, cfg.batch_size, &mut sampler)?;
            let path = [STREAM_DROPOUT, epoch as u64, b as u64];
            let (loss, grads) = batch_gradients(&state.weights, &batch, cfg.margin, (cfg.seed, &path))
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {epoch}, batch {b})")),
                    other => other,
                })?;
            let adam = state.adam.as_mut().expect("adam state");
            adam_step(state.weights.tensors_mut(), &grads, adam, &adam_cfg)?;
            loss_sum += loss;
        }
        state.epoch = epoch;
        let mean_loss = if cfg.batches_per_epoch == 0 {
            0.0
        } else {
            loss_sum / cfg.batches_per_epoch as f64
        };
        let train_eer = if train_eval.is_empty() {
            f64::NAN
        } else {
            selection_eer(&state.weights, train_eval)?.eer
        };
        let val = selection_eer(&state.weights, validation)?;
        let entry = EpochLog {
            epoch,
            mean_loss,
            train_eer,
            val_eer: val.eer,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        tracing::info!(
            epoch,
            mean_loss,
            train_eer,
            val_eer = val.eer,
            wall_ms = entry.wall_ms,
            "epoch finished"
        );
        if let (Some(f), Some(p)) = (&mut log_file, &opts.log_path) {
            let mut line = serde_json::to_vec(&entry)?;
            line.push(b'\n');
            f.write_all(&line).map_err(|e| Error::io(p, e))?;
        }
        log.push(entry);

        if state.best_val_eer.is_none_or(|b| val.eer < b) {
            state.best_val_eer = Some(val.eer);
            state.global_threshold = Some(val.threshold);
            best = state.clone();
            if let Some(p) = &opts.checkpoint_path {
                best.save(p)?;
            }
        }
    }
    Ok(TrainOutcome { best, last: state, log })
}
