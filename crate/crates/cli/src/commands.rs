//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use keyformer_core::data::{
    extract_features, generate_synthetic, group_by_subject, parse_raw_log, read_features, read_subject_list,
    select_subjects, split_subjects, write_features, write_raw_log, DatasetSplit, Manifest,
    SplitSizes, SubjectSessions, DEFAULT_SEQ_LEN,
};
use keyformer_core::eval::{
    det_curve, embed_subjects, evaluate_embeddings, export_embeddings, read_scores, write_det_csv, write_scores,
    ThresholdPolicy,
};
use keyformer_core::model::ModelConfig;
use keyformer_core::store::{TemplateStore, ThresholdSetting};
use keyformer_core::train::{train, Checkpoint, TrainOptions};
use keyformer_core::{Error, RngState};
use serde::Deserialize;

use crate::config::{FileConfig, ServiceConfig};
use crate::service::{self, EventPayload, SessionPayload};

pub const FEATURES_FILE: &str = "features.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RAW_FILE: &str = "raw.tsv";

#[derive(Debug, Parser)]
#[command(name = "keyformer", version, about = "Free-text keystroke verification")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Model checkpoint.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Processed dataset directory.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Full,
    Desk,
    Tiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a raw keystroke log into processed features.
    Ingest {
        /// Tab- or comma-separated keystroke log.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEQ_LEN)]
        seq_len: usize,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        subjects: usize,
        #[arg(long)]
        sessions: usize,
        #[arg(long)]
        events: usize,
        #[arg(long, default_value_t = DEFAULT_SEQ_LEN)]
        seq_len: usize,
    },
    /// Assign subjects to train / validation / test.
    Split {
        #[arg(long, default_value_t = 0)]
        train: usize,
        #[arg(long, default_value_t = 0)]
        validation: usize,
        #[arg(long, default_value_t = 0)]
        test: usize,
        /// Explicit subject lists (train, validation, test), adopted verbatim.
        #[arg(long, num_args = 3, value_names = ["TRAIN", "VALIDATION", "TEST"])]
        lists: Option<Vec<PathBuf>>,
    },
    /// Train with triplet loss; keeps the best validation checkpoint.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batches: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Architecture when the config file has no `[model]` section.
        #[arg(long, value_enum, default_value_t = Preset::Full)]
        preset: Preset,
        /// Continue from the checkpoint given by `--model`.
        #[arg(long)]
        resume: bool,
        /// Per-epoch JSONL log; defaults to the checkpoint path with `.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a subset and report Average and/or Global EER.
    Evaluate {
        #[arg(long = "E", default_value_t = 5)]
        enrolment: usize,
        #[arg(long, default_value = "both")]
        policy: ThresholdPolicy,
        #[arg(long, value_enum, default_value_t = Subset::Test)]
        subset: Subset,
        #[arg(long, default_value_t = 200)]
        det_points: usize,
        /// Store the Global-EER threshold in the checkpoint as the service default.
        #[arg(long)]
        write_threshold: bool,
    },
    /// Export session embeddings as CSV.
    Embed {
        #[arg(long, value_enum, default_value_t = Subset::All)]
        subset: Subset,
    },
    /// Enrol a session for a user, or set the user's threshold.
    Enroll {
        #[arg(long)]
        user: String,
        /// JSON session: an event array or an object with `events`.
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
        /// Fixed per-user threshold.
        #[arg(long, conflicts_with_all = ["calibrate", "clear_threshold"])]
        threshold: Option<f64>,
        /// Score file (as written by `evaluate`) to place the threshold at its EER point.
        #[arg(long, conflicts_with = "clear_threshold")]
        calibrate: Option<PathBuf>,
        /// Drop the per-user threshold in favour of the default.
        #[arg(long)]
        clear_threshold: bool,
    },
    /// Decide whether a session belongs to an enrolled user.
    Verify {
        #[arg(long)]
        user: String,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(_) => 2,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn data_dir(g: &GlobalArgs) -> CliResult<&Path> {
    g.data.as_deref().ok_or_else(|| usage("--data <dir> is required"))
}

fn model_path(g: &GlobalArgs) -> CliResult<&Path> {
    g.model.as_deref().ok_or_else(|| usage("--model <checkpoint> is required"))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        Error::Io {
            path: dir.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn load_dataset(dir: &Path) -> CliResult<(Manifest, Vec<SubjectSessions>)> {
    let manifest = Manifest::read(&dir.join(MANIFEST_FILE))?;
    let subjects = group_by_subject(read_features(&dir.join(FEATURES_FILE))?);
    Ok((manifest, subjects))
}

fn subset(manifest: &Manifest, all: &[SubjectSessions], which: Subset) -> CliResult<Vec<SubjectSessions>> {
    if which == Subset::All {
        return Ok(all.to_vec());
    }
    let split = manifest
        .split
        .as_ref()
        .ok_or_else(|| Error::Contract("dataset has no split; run `keyformer split` first".into()))?;
    let ids = match which {
        Subset::Train => &split.train,
        Subset::Validation => &split.validation,
        _ => &split.test,
    };
    Ok(select_subjects(all, ids)?)
}

fn write_processed(dir: &Path, sessions: &[keyformer_core::data::Session], mut manifest: Manifest) -> CliResult<()> {
    let seqs = sessions
        .iter()
        .map(|s| extract_features(s, manifest.seq_len))
        .collect::<keyformer_core::Result<Vec<_>>>()?;
    manifest.num_sessions = seqs.len();
    manifest.num_subjects = group_by_subject(seqs.clone()).len();
    write_features(&dir.join(FEATURES_FILE), &seqs)?;
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EventsFile {
    Bare(Vec<EventPayload>),
    Wrapped { events: Vec<EventPayload> },
}

fn read_session(path: &Path, user: &str) -> CliResult<SessionPayload> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let parsed: EventsFile = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let events = match parsed {
        EventsFile::Bare(v) | EventsFile::Wrapped { events: v } => v,
    };
    Ok(SessionPayload {
        user_id: user.to_string(),
        events,
    })
}

fn embed_file(cp: &Checkpoint, path: &Path, user: &str) -> CliResult<keyformer_core::model::Embedding> {
    let payload = read_session(path, user)?;
    let keys = service::validate(&payload).map_err(|e| Error::Contract(e.message().to_string()))?;
    Ok(service::embed_keys(&cp.weights, &keys, user)?)
}

fn service_config(file: &FileConfig, g: &GlobalArgs, store: Option<PathBuf>) -> ServiceConfig {
    let mut svc = file.service.clone();
    svc.apply_env(|k| std::env::var(k).ok());
    if let Some(m) = &g.model {
        svc.model = Some(m.clone());
    }
    if let Some(s) = store {
        svc.store = s;
    }
    svc
}

/// Runs a parsed command line. Standard output carries the results.
pub fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    let file = FileConfig::load_or_default(g.config.as_deref())?;
    let seed = g.seed.unwrap_or(0);
    match cli.command {
        Command::Ingest { input, seq_len } => {
            let out = g.out.as_deref().or(g.data.as_deref()).ok_or_else(|| usage("--out <dir> is required"))?;
            create_dir(out)?;
            let parsed = parse_raw_log(&input, &file.columns)?;
            let manifest = Manifest {
                seq_len,
                ..Manifest::default()
            };
            write_processed(out, &parsed.sessions, manifest)?;
            println!(
                "ingested {} sessions from {} rows ({} skipped) into {}",
                parsed.sessions.len(),
                parsed.rows,
                parsed.skipped,
                out.display()
            );
        }
        Command::Synth {
            subjects,
            sessions,
            events,
            seq_len,
        } => {
            let out = g.out.as_deref().or(g.data.as_deref()).ok_or_else(|| usage("--out <dir> is required"))?;
            create_dir(out)?;
            let data = generate_synthetic(subjects, sessions, events, &mut RngState::new(seed))?;
            write_raw_log(&out.join(RAW_FILE), &data.sessions)?;
            let manifest = Manifest {
                seq_len,
                seed: Some(seed),
                profiles: data.profiles,
                ..Manifest::default()
            };
            write_processed(out, &data.sessions, manifest)?;
            println!("wrote {} synthetic sessions to {}", data.sessions.len(), out.display());
        }
        Command::Split {
            train,
            validation,
            test,
            lists,
        } => {
            let dir = data_dir(g)?;
            let (mut manifest, subjects) = load_dataset(dir)?;
            let split = match lists {
                Some(files) => DatasetSplit::from_lists(
                    read_subject_list(&files[0])?,
                    read_subject_list(&files[1])?,
                    read_subject_list(&files[2])?,
                )?,
                None => {
                    let ids: Vec<String> = subjects.iter().map(|s| s.subject_id.clone()).collect();
                    let sizes = SplitSizes {
                        train,
                        validation,
                        test,
                    };
                    split_subjects(&ids, sizes, &mut RngState::new(seed))?
                }
            };
            let sizes = split.sizes();
            manifest.split = Some(split);
            manifest.write(&dir.join(MANIFEST_FILE))?;
            println!("split {}/{}/{}", sizes.train, sizes.validation, sizes.test);
        }
        Command::Train {
            epochs,
            batches,
            batch_size,
            learning_rate,
            preset,
            resume,
            log,
        } => {
            let dir = data_dir(g)?;
            let (manifest, all) = load_dataset(dir)?;
            let model = file.model.clone().unwrap_or_else(|| {
                let base = match preset {
                    Preset::Full => ModelConfig::default(),
                    Preset::Desk => ModelConfig::desk(),
                    Preset::Tiny => ModelConfig::tiny(),
                };
                ModelConfig {
                    seq_len: manifest.seq_len,
                    ..base
                }
            });
            let mut cfg = file.train.clone().unwrap_or_default();
            if let Some(s) = g.seed {
                cfg.seed = s;
            }
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            if let Some(v) = batches {
                cfg.batches_per_epoch = v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = learning_rate {
                cfg.learning_rate = v;
            }
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("model.ckpt"));
            let resume = if resume {
                Some(Checkpoint::load_expecting(model_path(g)?, &model)?)
            } else {
                None
            };
            let train_set = subset(&manifest, &all, Subset::Train)?;
            let validation = subset(&manifest, &all, Subset::Validation)?;
            let opts = TrainOptions {
                checkpoint_path: Some(out.clone()),
                log_path: Some(log.unwrap_or_else(|| out.with_extension("log.jsonl"))),
                resume,
            };
            let outcome = train(&model, &cfg, &train_set, &validation, &opts)?;
            if outcome.log.is_empty() {
                outcome.best.save(&out)?;
            }
            println!(
                "trained {} epochs; best validation EER {} at epoch {}; checkpoint {}",
                outcome.log.len(),
                outcome.best.best_val_eer.map_or("n/a".into(), |v| format!("{v:.4}")),
                outcome.best.epoch,
                out.display()
            );
        }
        Command::Evaluate {
            enrolment,
            policy,
            subset: which,
            det_points,
            write_threshold,
        } => {
            let dir = data_dir(g)?;
            let path = model_path(g)?;
            let mut cp = Checkpoint::load(path)?;
            let (manifest, all) = load_dataset(dir)?;
            let subjects = subset(&manifest, &all, which)?;
            let emb = embed_subjects(&cp.weights, &subjects)?;
            let (sets, report) = evaluate_embeddings(&emb, enrolment, policy)?;
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("."));
            create_dir(&out)?;
            write_scores(&out.join("scores.jsonl"), &sets, enrolment)?;
            let genuine: Vec<f64> = sets.iter().flat_map(|s| s.genuine.iter().copied()).collect();
            let impostor: Vec<f64> = sets.iter().flat_map(|s| s.impostor.iter().copied()).collect();
            write_det_csv(&out.join("det.csv"), &det_curve(&genuine, &impostor, det_points)?)?;
            println!("subjects {} E {}", report.subjects, enrolment);
            if let Some(a) = &report.average {
                println!("average EER {:.4} (mean threshold {:.6})", a.eer, a.threshold);
            }
            if let Some(gl) = &report.global {
                println!("global EER {:.4} (threshold {:.6})", gl.eer, gl.threshold);
            }
            if write_threshold {
                let gl = report
                    .global
                    .as_ref()
                    .ok_or_else(|| usage("--write-threshold needs --policy global or both"))?;
                cp.global_threshold = Some(gl.threshold);
                cp.save(path)?;
                println!("stored threshold {:.6} in {}", gl.threshold, path.display());
            }
        }
        Command::Embed { subset: which } => {
            let dir = data_dir(g)?;
            let cp = Checkpoint::load(model_path(g)?)?;
            let (manifest, all) = load_dataset(dir)?;
            let subjects = subset(&manifest, &all, which)?;
            let emb = embed_subjects(&cp.weights, &subjects)?;
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("embeddings.csv"));
            export_embeddings(&out, &subjects, &emb)?;
            println!("wrote {} subjects to {}", subjects.len(), out.display());
        }
        Command::Enroll {
            user,
            events,
            store,
            threshold,
            calibrate,
            clear_threshold,
        } => {
            let svc = service_config(&file, g, store);
            let mut st = TemplateStore::open(&svc.store)?;
            if events.is_none() && threshold.is_none() && calibrate.is_none() && !clear_threshold {
                return Err(usage("enroll needs --events and/or a threshold option"));
            }
            if let Some(ev) = events {
                let model = svc.model.as_deref().ok_or_else(|| usage("--model <checkpoint> is required"))?;
                let cp = Checkpoint::load(model)?;
                let emb = embed_file(&cp, &ev, &user)?;
                let n = st.enroll(&user, emb, now_ms())?;
                println!("{user}: {n} sessions enrolled");
            }
            let setting = if let Some(t) = threshold {
                Some(ThresholdSetting::Fixed(t))
            } else if let Some(p) = calibrate {
                let (genuine, impostor) = read_scores(&p)?;
                Some(ThresholdSetting::Calibrate { genuine, impostor })
            } else if clear_threshold {
                Some(ThresholdSetting::Default)
            } else {
                None
            };
            if let Some(s) = setting {
                let rec = st.set_threshold(&user, s, now_ms())?;
                match rec.threshold {
                    Some(t) => println!("{user}: threshold {t:.6}"),
                    None => println!("{user}: threshold cleared"),
                }
            }
        }
        Command::Verify {
            user,
            events,
            store,
            threshold,
        } => {
            let mut svc = service_config(&file, g, store);
            if threshold.is_some() {
                svc.threshold = threshold;
            }
            let model = svc.model.as_deref().ok_or_else(|| usage("--model <checkpoint> is required"))?;
            let cp = Checkpoint::load(model)?;
            let st = TemplateStore::open(&svc.store)?;
            if st.get(&user).is_none() {
                return Err(Error::UnknownUser(user).into());
            }
            let probe = embed_file(&cp, &events, &user)?;
            let decision = st.verify(&user, &probe, svc.threshold.or(cp.global_threshold), &cp.digest()?)?;
            println!("{}", serde_json::to_string(&decision).map_err(Error::from)?);
        }
        Command::Serve { bind, store, threshold } => {
            let mut svc = service_config(&file, g, store);
            if let Some(b) = bind {
                svc.bind = b;
            }
            if threshold.is_some() {
                svc.threshold = threshold;
            }
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Io {
                path: "<runtime>".into(),
                source: e,
            })?;
            rt.block_on(async {
                let running = service::start(&svc).await?;
                println!("listening on http://{}", running.addr);
                let _ = tokio::signal::ctrl_c().await;
                running.stop().await
            })?;
        }
    }
    Ok(())
}
