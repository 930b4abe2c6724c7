//! The subcommands as library functions.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use sparkdqn::classify::{data_root, AccuracyRecord, DatasetHandle};
use sparkdqn::models::{ArchKind, ArchitectureSpec, LayerRow, QNetwork};
use sparkdqn::rl::random_baseline;
use sparkdqn::snn::DendriteSharing;
use sparkdqn::{ClassifyTrainer, Real, Trainer};

use crate::checkpoint::{self, Checkpoint, CheckpointKind};
use crate::config::{parse_config, RunConfig, RESUMABLE_KEYS};
use crate::CliError;

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EVAL_FILE: &str = "eval.jsonl";

/// Random-policy episodes behind each baseline mean.
pub const BASELINE_EPISODES: usize = 200;

/// Frames between progress lines on stderr.
const LOG_FRAMES: u64 = 10_000;

/// Greedy-policy returns for one environment next to the random policy's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub env: String,
    pub episodes: usize,
    pub mean_return: f64,
    pub baseline_mean: f64,
    pub returns: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Effective configuration: defaults (or the checkpoint's own when
/// resuming), then the file, then flag overrides. A resumed run may only
/// change budget and output keys.
pub fn resolve_config(
    resume: Option<&Checkpoint>,
    file_text: Option<&str>,
    overrides: &[(String, String)],
) -> Result<RunConfig, CliError> {
    let Some(ck) = resume else {
        return parse_config(file_text, overrides);
    };
    let saved = parse_config(Some(&ck.config), &[])?;
    let mut cfg = saved.clone();
    if let Some(text) = file_text {
        cfg.apply_text(text)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    let fixed: Vec<_> = cfg.differing_keys(&saved).into_iter().filter(|k| !RESUMABLE_KEYS.contains(k)).collect();
    if !fixed.is_empty() {
        return Err(CliError::Config(format!("{}: cannot change when resuming", fixed.join(", "))));
    }
    Ok(cfg)
}

struct Metrics(BufWriter<File>);

impl Metrics {
    /// Fresh runs start a new file; resumed runs append.
    fn open(dir: &Path, append: bool) -> Result<Self, CliError> {
        let path = dir.join(METRICS_FILE);
        let file = if append {
            OpenOptions::new().create(true).append(true).open(path)?
        } else {
            File::create(path)?
        };
        Ok(Self(BufWriter::new(file)))
    }

    fn write<T: Serialize>(&mut self, record: &T) -> sparkdqn::Result<()> {
        serde_json::to_writer(&mut self.0, record).map_err(std::io::Error::from)?;
        self.0.write_all(b"\n")?;
        Ok(())
    }

    fn flush(&mut self) -> Result<(), CliError> {
        Ok(self.0.flush()?)
    }
}

fn prepare_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join(CONFIG_FILE), cfg.echo())?;
    Ok(cfg.out_dir.clone())
}

fn save_rl(dir: &Path, cfg: &RunConfig, trainer: &Trainer) -> Result<(), CliError> {
    let state = trainer.export_state(cfg.checkpoint_replay)?;
    let ck = Checkpoint { kind: CheckpointKind::Rl, config: cfg.echo(), state };
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &ck)
}

/// Evaluates every environment of `trainer` and runs the random baseline
/// with the same seed over [`BASELINE_EPISODES`] episodes.
pub fn evaluate_trainer(trainer: &mut Trainer, episodes: usize, seed: u64) -> Result<Vec<EvalSummary>, CliError> {
    let frame_skip = trainer.config().frame_skip;
    let mut out = Vec::new();
    for j in 0..trainer.slots.len() {
        let env = trainer.slots[j].name.clone();
        let returns = trainer.evaluate(j, episodes, seed)?;
        let baseline = random_baseline(&env, BASELINE_EPISODES, seed, frame_skip)?;
        out.push(EvalSummary { env, episodes, mean_return: mean(&returns), baseline_mean: mean(&baseline), returns });
    }
    Ok(out)
}

fn write_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CliError> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(std::io::Error::from)?);
        text.push('\n');
    }
    Ok(fs::write(path, text)?)
}

/// Runs Q-learning to the frame budget, writing the config echo, per-episode
/// metrics, checkpoints and a final evaluation into the output directory.
pub fn train_rl(cfg: &RunConfig, resume: Option<Checkpoint>) -> Result<Vec<EvalSummary>, CliError> {
    let resumed = resume.is_some();
    let mut trainer = match resume {
        Some(ck) if ck.kind == CheckpointKind::Rl => {
            let mut t = Trainer::from_state(&ck.state)?;
            t.set_total_frames(cfg.trainer.total_frames);
            t
        }
        Some(_) => return Err(CliError::Config("resume: checkpoint is not from train-rl".into())),
        None => Trainer::new(&cfg.rl_spec(), &cfg.trainer, &cfg.envs)?,
    };
    let dir = prepare_dir(cfg)?;
    let mut metrics = Metrics::open(&dir, resumed)?;
    let mut recent: Vec<Vec<f64>> = vec![Vec::new(); trainer.slots.len()];
    while !trainer.is_done() {
        let frame = trainer.counters().frame;
        let mut stop = (frame / LOG_FRAMES + 1) * LOG_FRAMES;
        if cfg.checkpoint_period > 0 {
            stop = stop.min((frame / cfg.checkpoint_period + 1) * cfg.checkpoint_period);
        }
        let ran = trainer.run_frames(stop - frame, &mut |r| {
            recent[r.env_index].push(r.episode_return);
            metrics.write(r)
        });
        if let Err(e) = ran {
            metrics.flush()?;
            save_rl(&dir, cfg, &trainer)?;
            return Err(e.into());
        }
        metrics.flush()?;
        let frame = trainer.counters().frame;
        if cfg.checkpoint_period > 0 && frame % cfg.checkpoint_period == 0 && !trainer.is_done() {
            save_rl(&dir, cfg, &trainer)?;
        }
        if frame % LOG_FRAMES == 0 {
            let means: Vec<String> = recent
                .iter_mut()
                .zip(&trainer.slots)
                .map(|(r, s)| format!("{} {:.2} ({} ep)", s.name, mean(r), std::mem::take(r).len()))
                .collect();
            let eps = trainer.config().epsilon.at(frame);
            eprintln!("frame {frame}: epsilon {eps:.3}; {}", means.join("; "));
        }
    }
    save_rl(&dir, cfg, &trainer)?;
    let summary = evaluate_trainer(&mut trainer, cfg.eval_episodes, cfg.trainer.seed)?;
    write_lines(&dir.join(EVAL_FILE), &summary)?;
    Ok(summary)
}

fn load_datasets(cfg: &RunConfig, names: &[String]) -> Result<Vec<DatasetHandle>, CliError> {
    let root = cfg.data_root.clone().unwrap_or_else(data_root);
    names
        .iter()
        .map(|n| {
            let d = DatasetHandle::load(&root, n)?;
            Ok(d.truncated(cfg.train_limit.unwrap_or(usize::MAX), cfg.test_limit.unwrap_or(usize::MAX)))
        })
        .collect()
}

fn save_classify(dir: &Path, cfg: &RunConfig, trainer: &ClassifyTrainer) -> Result<(), CliError> {
    let ck = Checkpoint { kind: CheckpointKind::Classify, config: cfg.echo(), state: trainer.export_state()? };
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &ck)
}

/// Trains the classifier over the configured datasets, one metrics record
/// per task and split each epoch. Returns the last epoch's test accuracy.
pub fn train_classify(cfg: &RunConfig, resume: Option<Checkpoint>) -> Result<Vec<AccuracyRecord>, CliError> {
    let resumed = resume.is_some();
    let mut trainer = match resume {
        Some(ck) if ck.kind == CheckpointKind::Classify => {
            let names = ClassifyTrainer::saved_tasks(&ck.state)?;
            let mut t = ClassifyTrainer::from_state(&ck.state, &load_datasets(cfg, &names)?)?;
            t.set_epochs(cfg.epochs);
            t
        }
        Some(_) => return Err(CliError::Config("resume: checkpoint is not from train-classify".into())),
        None => ClassifyTrainer::new(&cfg.classifier_spec(), &cfg.classify_config(), &load_datasets(cfg, &cfg.datasets)?)?,
    };
    let dir = prepare_dir(cfg)?;
    let mut metrics = Metrics::open(&dir, resumed)?;
    let mut last = Vec::new();
    while !trainer.is_done() {
        let records = trainer.run_epoch()?;
        for r in &records {
            metrics.write(r)?;
        }
        metrics.flush()?;
        let epoch = trainer.epoch() as u64;
        let line: Vec<String> =
            records.iter().map(|r| format!("{} {} {:.4}", r.task, r.split, r.accuracy)).collect();
        eprintln!("epoch {epoch}: {}", line.join("; "));
        if cfg.checkpoint_period > 0 && epoch % cfg.checkpoint_period == 0 && !trainer.is_done() {
            save_classify(&dir, cfg, &trainer)?;
        }
        last = records.into_iter().filter(|r| r.split == "test").collect();
    }
    save_classify(&dir, cfg, &trainer)?;
    Ok(last)
}

/// Outcome of `eval` on either kind of checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum EvalReport {
    Rl(Vec<EvalSummary>),
    Classify(Vec<AccuracyRecord>),
}

impl EvalReport {
    pub fn lines(&self) -> Vec<String> {
        let json = |v: serde_json::Result<String>| v.expect("plain records serialize");
        match self {
            EvalReport::Rl(v) => v.iter().map(|r| json(serde_json::to_string(r))).collect(),
            EvalReport::Classify(v) => v.iter().map(|r| json(serde_json::to_string(r))).collect(),
        }
    }
}

/// Evaluates a saved run: greedy returns against the random baseline, or
/// test accuracy per task.
pub fn eval(path: &Path, episodes: Option<usize>) -> Result<EvalReport, CliError> {
    let ck = checkpoint::load(path)?;
    let cfg = parse_config(Some(&ck.config), &[])?;
    match ck.kind {
        CheckpointKind::Rl => {
            let mut t = Trainer::from_state(&ck.state)?;
            Ok(EvalReport::Rl(evaluate_trainer(&mut t, episodes.unwrap_or(cfg.eval_episodes), cfg.trainer.seed)?))
        }
        CheckpointKind::Classify => {
            let names = ClassifyTrainer::saved_tasks(&ck.state)?;
            let mut t = ClassifyTrainer::from_state(&ck.state, &load_datasets(&cfg, &names)?)?;
            Ok(EvalReport::Classify(t.test_accuracy()?))
        }
    }
}

/// Builds the full-size network and returns its trainable parameter count
/// and layer trace.
pub fn count_params(
    kind: ArchKind,
    actions: usize,
    tasks: usize,
    sharing: DendriteSharing,
) -> Result<(usize, Vec<LayerRow>), CliError> {
    let spec = ArchitectureSpec { action_count: actions, task_count: tasks, dendrite_sharing: sharing, ..ArchitectureSpec::new(kind) };
    spec.validate()?;
    let net = QNetwork::<Real>::build(&spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok((net.count_params(), net.layer_trace()))
}
