//! Flat `key=value` run configuration with `#` comments.

use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::Serialize;

use sparkdqn::classify::{ClassifierKind, ClassifierSpec, ClassifyConfig};
use sparkdqn::envs::ENV_NAMES;
use sparkdqn::models::{ArchKind, ArchitectureSpec};
use sparkdqn::rl::TrainerConfig;
use sparkdqn::snn::{DendriteSharing, Readout, ResetMode};
use sparkdqn::tensor::Surrogate;

use crate::CliError;

/// Network size preset for the RL input and hidden width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 84×84×4 frames, 512 hidden units.
    Full,
    /// 44×44×2 frames, 128 hidden units.
    Downscale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    Rectangular,
    Arctan,
}

/// Everything one run needs. Defaults follow the published setup.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: ArchKind,
    pub profile: Profile,
    pub envs: Vec<String>,
    pub datasets: Vec<String>,
    /// Context length; `None` means 3 for RL and one per dataset.
    pub tasks: Option<usize>,
    /// Hidden width; `None` takes the profile's (classifier: 128).
    pub fc_width: Option<usize>,
    pub t_sim: usize,
    pub reset: ResetMode,
    pub v_th: f64,
    pub surrogate: SurrogateKind,
    pub surrogate_width: f64,
    pub surrogate_height: f64,
    pub surrogate_alpha: f64,
    pub dendrite_sharing: DendriteSharing,
    pub readout: Readout,
    pub trainer: TrainerConfig,
    pub eval_episodes: usize,
    pub classifier: ClassifierKind,
    pub input_size: usize,
    pub epochs: usize,
    pub interleave: usize,
    pub eval_batch: usize,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub data_root: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Frames (RL) or epochs (classification) between checkpoints; 0 keeps
    /// only the final one.
    pub checkpoint_period: u64,
    pub checkpoint_replay: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: ArchKind::MtsparkAd,
            profile: Profile::Full,
            envs: ENV_NAMES.iter().map(|s| s.to_string()).collect(),
            datasets: vec!["mnist".into()],
            tasks: None,
            fc_width: None,
            t_sim: 4,
            reset: ResetMode::default(),
            v_th: 1.0,
            surrogate: SurrogateKind::Rectangular,
            surrogate_width: 1.0,
            surrogate_height: 1.0,
            surrogate_alpha: 2.0,
            dendrite_sharing: DendriteSharing::default(),
            readout: Readout::default(),
            trainer: TrainerConfig::default(),
            eval_episodes: 20,
            classifier: ClassifierKind::default(),
            input_size: 52,
            epochs: 10,
            interleave: 1,
            eval_batch: 500,
            train_limit: None,
            test_limit: None,
            data_root: None,
            out_dir: PathBuf::from("run"),
            checkpoint_period: 0,
            checkpoint_replay: true,
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "arch",
    "profile",
    "envs",
    "datasets",
    "tasks",
    "fc_width",
    "t_sim",
    "reset",
    "v_th",
    "surrogate",
    "surrogate_width",
    "surrogate_height",
    "surrogate_alpha",
    "dendrite_sharing",
    "readout",
    "seed",
    "batch_size",
    "gamma",
    "lr",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "replay_capacity",
    "epsilon_start",
    "epsilon_end",
    "epsilon_decay_frames",
    "target_sync",
    "switch_period",
    "learning_start",
    "total_frames",
    "clip_rewards",
    "train_all_envs",
    "train_interval",
    "frame_skip",
    "eval_epsilon",
    "eval_episodes",
    "classifier",
    "input_size",
    "epochs",
    "interleave",
    "eval_batch",
    "train_limit",
    "test_limit",
    "data_root",
    "out_dir",
    "checkpoint_period",
    "checkpoint_replay",
];

/// Keys a resumed run may change; the rest must match the checkpoint.
pub const RESUMABLE_KEYS: &[&str] =
    &["total_frames", "epochs", "eval_episodes", "out_dir", "checkpoint_period", "checkpoint_replay", "data_root"];

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: cannot use {value:?}: {why}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| bad(key, value, e))
}

fn optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    if value == "auto" || value == "none" {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

fn named<T: DeserializeOwned>(key: &str, value: &str) -> Result<T, CliError> {
    serde_json::from_value(serde_json::Value::String(value.into())).map_err(|e| bad(key, value, e))
}

fn name_of<T: Serialize>(value: &T) -> String {
    match serde_json::to_value(value) {
        Ok(serde_json::Value::String(s)) => s,
        other => panic!("unit variant expected, got {other:?}"),
    }
}

fn list(value: &str) -> Vec<String> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn show<T: ToString>(value: &Option<T>, none: &str) -> String {
    value.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        let t = &mut self.trainer;
        match key {
            "arch" => self.arch = value.parse().map_err(|e| bad(key, value, e))?,
            "profile" => self.profile = named(key, value)?,
            "envs" => self.envs = list(value),
            "datasets" => self.datasets = list(value),
            "tasks" => self.tasks = optional(key, value)?,
            "fc_width" => self.fc_width = optional(key, value)?,
            "t_sim" => self.t_sim = num(key, value)?,
            "reset" => self.reset = named(key, value)?,
            "v_th" => self.v_th = num(key, value)?,
            "surrogate" => self.surrogate = named(key, value)?,
            "surrogate_width" => self.surrogate_width = num(key, value)?,
            "surrogate_height" => self.surrogate_height = num(key, value)?,
            "surrogate_alpha" => self.surrogate_alpha = num(key, value)?,
            "dendrite_sharing" => self.dendrite_sharing = named(key, value)?,
            "readout" => self.readout = named(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "gamma" => t.gamma = num(key, value)?,
            "lr" => t.adam.lr = num(key, value)?,
            "adam_beta1" => t.adam.beta1 = num(key, value)?,
            "adam_beta2" => t.adam.beta2 = num(key, value)?,
            "adam_eps" => t.adam.eps = num(key, value)?,
            "replay_capacity" => t.replay_capacity = num(key, value)?,
            "epsilon_start" => t.epsilon.start = num(key, value)?,
            "epsilon_end" => t.epsilon.end = num(key, value)?,
            "epsilon_decay_frames" => t.epsilon.decay_frames = num(key, value)?,
            "target_sync" => t.target_sync = num(key, value)?,
            "switch_period" => t.switch_period = num(key, value)?,
            "learning_start" => t.learning_start = num(key, value)?,
            "total_frames" => t.total_frames = optional(key, value)?,
            "clip_rewards" => t.clip_rewards = num(key, value)?,
            "train_all_envs" => t.train_all_envs = num(key, value)?,
            "train_interval" => t.train_interval = num(key, value)?,
            "frame_skip" => t.frame_skip = num(key, value)?,
            "eval_epsilon" => t.eval_epsilon = num(key, value)?,
            "eval_episodes" => self.eval_episodes = num(key, value)?,
            "classifier" => self.classifier = named(key, value)?,
            "input_size" => self.input_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "interleave" => self.interleave = num(key, value)?,
            "eval_batch" => self.eval_batch = num(key, value)?,
            "train_limit" => self.train_limit = optional(key, value)?,
            "test_limit" => self.test_limit = optional(key, value)?,
            "data_root" => self.data_root = (!value.is_empty() && value != "auto").then(|| PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "checkpoint_period" => self.checkpoint_period = num(key, value)?,
            "checkpoint_replay" => self.checkpoint_replay = num(key, value)?,
            _ => return Err(CliError::Config(format!("{key}: unknown key"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.trainer;
        Some(match key {
            "arch" => self.arch.to_string(),
            "profile" => name_of(&self.profile),
            "envs" => self.envs.join(","),
            "datasets" => self.datasets.join(","),
            "tasks" => show(&self.tasks, "auto"),
            "fc_width" => show(&self.fc_width, "auto"),
            "t_sim" => self.t_sim.to_string(),
            "reset" => name_of(&self.reset),
            "v_th" => self.v_th.to_string(),
            "surrogate" => name_of(&self.surrogate),
            "surrogate_width" => self.surrogate_width.to_string(),
            "surrogate_height" => self.surrogate_height.to_string(),
            "surrogate_alpha" => self.surrogate_alpha.to_string(),
            "dendrite_sharing" => name_of(&self.dendrite_sharing),
            "readout" => name_of(&self.readout),
            "seed" => t.seed.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "gamma" => t.gamma.to_string(),
            "lr" => t.adam.lr.to_string(),
            "adam_beta1" => t.adam.beta1.to_string(),
            "adam_beta2" => t.adam.beta2.to_string(),
            "adam_eps" => t.adam.eps.to_string(),
            "replay_capacity" => t.replay_capacity.to_string(),
            "epsilon_start" => t.epsilon.start.to_string(),
            "epsilon_end" => t.epsilon.end.to_string(),
            "epsilon_decay_frames" => t.epsilon.decay_frames.to_string(),
            "target_sync" => t.target_sync.to_string(),
            "switch_period" => t.switch_period.to_string(),
            "learning_start" => t.learning_start.to_string(),
            "total_frames" => show(&t.total_frames, "auto"),
            "clip_rewards" => t.clip_rewards.to_string(),
            "train_all_envs" => t.train_all_envs.to_string(),
            "train_interval" => t.train_interval.to_string(),
            "frame_skip" => t.frame_skip.to_string(),
            "eval_epsilon" => t.eval_epsilon.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            "classifier" => name_of(&self.classifier),
            "input_size" => self.input_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "interleave" => self.interleave.to_string(),
            "eval_batch" => self.eval_batch.to_string(),
            "train_limit" => show(&self.train_limit, "none"),
            "test_limit" => show(&self.test_limit, "none"),
            "data_root" => self.data_root.as_ref().map_or_else(|| "auto".into(), |p| p.display().to_string()),
            "out_dir" => self.out_dir.display().to_string(),
            "checkpoint_period" => self.checkpoint_period.to_string(),
            "checkpoint_replay" => self.checkpoint_replay.to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// The effective configuration as re-parsable text.
    pub fn echo(&self) -> String {
        KEYS.iter().map(|k| format!("{k}={}\n", self.get(k).expect("listed key"))).collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |key: &str, why: &str| Err(CliError::Config(format!("{key}: {why}")));
        self.trainer.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.envs.is_empty() {
            return fail("envs", "at least one environment is required");
        }
        if let Some(e) = self.envs.iter().find(|e| !ENV_NAMES.contains(&e.as_str())) {
            return fail("envs", &format!("unknown environment {e:?}; known: {}", ENV_NAMES.join(", ")));
        }
        if self.datasets.is_empty() {
            return fail("datasets", "at least one dataset is required");
        }
        if self.tasks == Some(0) {
            return fail("tasks", "must be positive");
        }
        if self.t_sim == 0 {
            return fail("t_sim", "must be positive");
        }
        if self.input_size < 36 {
            return fail("input_size", "must be at least 36");
        }
        if self.eval_episodes == 0 {
            return fail("eval_episodes", "must be positive");
        }
        self.classify_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.rl_spec().validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn surrogate(&self) -> Surrogate {
        match self.surrogate {
            SurrogateKind::Rectangular => {
                Surrogate::Rectangular { width: self.surrogate_width, height: self.surrogate_height }
            }
            SurrogateKind::Arctan => Surrogate::ArcTan { alpha: self.surrogate_alpha },
        }
    }

    pub fn rl_spec(&self) -> ArchitectureSpec {
        let base = match self.profile {
            Profile::Full => ArchitectureSpec::new(self.arch),
            Profile::Downscale => ArchitectureSpec::downscale(self.arch),
        };
        ArchitectureSpec {
            task_count: self.tasks.unwrap_or(3),
            fc_width: self.fc_width.unwrap_or(base.fc_width),
            t_sim: self.t_sim,
            reset: self.reset,
            v_th: self.v_th,
            surrogate: self.surrogate(),
            dendrite_sharing: self.dendrite_sharing,
            readout: self.readout,
            ..base
        }
    }

    pub fn classifier_spec(&self) -> ClassifierSpec {
        ClassifierSpec {
            kind: self.classifier,
            input_size: self.input_size,
            fc_width: self.fc_width.unwrap_or(128),
            task_count: self.tasks.unwrap_or(self.datasets.len()),
            t_sim: self.t_sim,
            dendrite_sharing: self.dendrite_sharing,
        }
    }

    pub fn classify_config(&self) -> ClassifyConfig {
        ClassifyConfig {
            epochs: self.epochs,
            batch_size: self.trainer.batch_size,
            adam: self.trainer.adam,
            seed: self.trainer.seed,
            interleave: self.interleave,
            eval_batch: self.eval_batch,
        }
    }

    /// Names of keys whose values differ between `self` and `other`.
    pub fn differing_keys(&self, other: &Self) -> Vec<&'static str> {
        KEYS.iter().copied().filter(|k| self.get(k) != other.get(k)).collect()
    }
}

/// Defaults, then the file's text, then `key=value` overrides in order.
pub fn parse_config(file_text: Option<&str>, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(text) = file_text {
        cfg.apply_text(text)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Splits a `--set key=value` argument.
pub fn split_override(arg: &str) -> Result<(String, String), CliError> {
    arg.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {arg:?}")))
}
