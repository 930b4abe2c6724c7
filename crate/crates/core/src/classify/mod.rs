//! Multi-task image classification with the same convolutional trunk and a
//! context-gated spiking head.

mod idx;

pub use idx::{load_idx, parse_idx, read_maybe_gz, IdxArray, IMAGES_MAGIC, LABELS_MAGIC};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{bytes_to_unit, resize_bilinear};
use crate::error::{Error, Result};
use crate::models::{argmax, ArchKind, ArchitectureSpec, QNetwork};
use crate::rl::inference_mode;
use crate::scalar::Scalar;
use crate::snn::{ContextSignal, DendriteSharing};
use crate::state::{export_adam, import_adam, StateBundle};
use crate::tensor::{cross_entropy, Adam, AdamConfig, BnMode};

pub const CLASS_COUNT: usize = 10;

/// Environment variable overriding the dataset root.
pub const DATA_ENV: &str = "SPARKDQN_DATA";

/// Dataset root: `$SPARKDQN_DATA` if set, otherwise `./data`.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

/// One split of a grayscale dataset, images stored as bytes `[N, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetHandle {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub train: Split,
    pub test: Split,
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    let idx = if stem.ends_with("images") { "idx3" } else { "idx1" };
    let candidates = [
        stem.to_string(),
        format!("{stem}-{idx}-ubyte"),
        format!("{stem}.{idx}-ubyte"),
        format!("{stem}-{idx}-ubyte.gz"),
        format!("{stem}.gz"),
    ];
    candidates
        .iter()
        .map(|c| dir.join(c))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Config(format!("no `{stem}` file under {}", dir.display())))
}

fn load_split(dir: &Path, prefix: &str) -> Result<(Split, usize, usize)> {
    let images = load_idx(&find_file(dir, &format!("{prefix}-images"))?, IMAGES_MAGIC)?;
    let labels = load_idx(&find_file(dir, &format!("{prefix}-labels"))?, LABELS_MAGIC)?;
    if images.count() != labels.count() {
        return Err(Error::dim("load_dataset", format!("{prefix} label count"), images.count(), labels.count()));
    }
    if let Some(bad) = labels.data.iter().find(|l| **l as usize >= CLASS_COUNT) {
        return Err(Error::Config(format!("label {bad} outside [0, {CLASS_COUNT})")));
    }
    let (h, w) = (images.dims[1], images.dims[2]);
    Ok((Split { images: images.data, labels: labels.data }, h, w))
}

impl DatasetHandle {
    /// Loads `<root>/<name>/{train,t10k}-{images,labels}` (IDX, optionally
    /// gzipped).
    pub fn load(root: &Path, name: &str) -> Result<Self> {
        let dir = root.join(name);
        let (train, h, w) = load_split(&dir, "train")?;
        let (test, th, tw) = load_split(&dir, "t10k")?;
        if (h, w) != (th, tw) {
            return Err(Error::dim("load_dataset", "test image height", h, th));
        }
        Ok(Self { name: name.to_string(), height: h, width: w, train, test })
    }

    /// Bilinear resize of every image to `size×size`.
    pub fn resized(&self, size: usize) -> Self {
        if (self.height, self.width) == (size, size) {
            return self.clone();
        }
        let resize = |s: &Split| {
            let px = self.height * self.width;
            let mut images = Vec::with_capacity(s.len() * size * size);
            for img in s.images.chunks_exact(px) {
                let src: Vec<f32> = img.iter().map(|b| *b as f32).collect();
                let out = resize_bilinear(&src, self.height, self.width, size, size);
                images.extend(out.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
            }
            Split { images, labels: s.labels.clone() }
        };
        Self { name: self.name.clone(), height: size, width: size, train: resize(&self.train), test: resize(&self.test) }
    }

    /// Keeps the first `train` and `test` examples of each split.
    pub fn truncated(mut self, train: usize, test: usize) -> Self {
        let px = self.height * self.width;
        for (s, n) in [(&mut self.train, train), (&mut self.test, test)] {
            let n = n.min(s.len());
            s.images.truncate(n * px);
            s.labels.truncate(n);
        }
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    /// ReLU trunk and head, no dendrites.
    Baseline,
    /// IF neurons throughout with a dendrite-gated hidden layer.
    #[default]
    SpikingDendrite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierSpec {
    pub kind: ClassifierKind,
    /// Side of the square input after resizing.
    pub input_size: usize,
    pub fc_width: usize,
    pub task_count: usize,
    pub t_sim: usize,
    pub dendrite_sharing: DendriteSharing,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            kind: ClassifierKind::default(),
            input_size: 52,
            fc_width: 128,
            task_count: 1,
            t_sim: 4,
            dendrite_sharing: DendriteSharing::default(),
        }
    }
}

impl ClassifierSpec {
    pub fn architecture(&self) -> ArchitectureSpec {
        let kind = match self.kind {
            ClassifierKind::Baseline => ArchKind::Dqn,
            ClassifierKind::SpikingDendrite => ArchKind::MtsparkAd,
        };
        ArchitectureSpec {
            action_count: CLASS_COUNT,
            task_count: self.task_count,
            input: [1, self.input_size, self.input_size],
            fc_width: self.fc_width,
            t_sim: self.t_sim,
            dendrite_sharing: self.dendrite_sharing,
            ..ArchitectureSpec::new(kind)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Consecutive batches drawn from one task before moving to the next.
    pub interleave: usize,
    pub eval_batch: usize,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 64, adam: AdamConfig::default(), seed: 0, interleave: 1, eval_batch: 500 }
    }
}

impl ClassifyConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |k: &str| Err(Error::Config(format!("{k}: must be positive")));
        if self.batch_size == 0 {
            return fail("batch_size");
        }
        if self.interleave == 0 {
            return fail("interleave");
        }
        if self.eval_batch == 0 {
            return fail("eval_batch");
        }
        if !(self.adam.lr > 0.0) {
            return fail("lr");
        }
        Ok(())
    }
}

/// One accuracy line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    pub epoch: usize,
    pub task: String,
    pub split: String,
    pub accuracy: f64,
}

fn gather<S: Scalar>(split: &Split, px: usize, indices: &[usize]) -> (Vec<S>, Vec<usize>) {
    let mut x = Vec::with_capacity(indices.len() * px);
    let mut y = Vec::with_capacity(indices.len());
    for &i in indices {
        x.extend(bytes_to_unit::<S>(&split.images[i * px..(i + 1) * px]));
        y.push(split.labels[i] as usize);
    }
    (x, y)
}

/// Fraction of argmax-correct predictions over a whole split.
pub fn evaluate<S: Scalar>(net: &mut QNetwork<S>, split: &Split, ctx: &ContextSignal, batch: usize) -> Result<f64> {
    let px = net.spec().input_len();
    if split.images.len() != split.len() * px {
        return Err(Error::dim("evaluate", "image size", px, split.images.len() / split.len().max(1)));
    }
    if split.is_empty() {
        return Ok(0.0);
    }
    let mode = inference_mode(net);
    let classes = net.action_count();
    let mut correct = 0usize;
    let order: Vec<usize> = (0..split.len()).collect();
    for chunk in order.chunks(batch.max(1)) {
        let (x, y) = gather::<S>(split, px, chunk);
        let out = net.forward(&x, chunk.len(), ctx, mode, false)?;
        correct += out.chunks_exact(classes).zip(&y).filter(|(row, &label)| argmax(row) == label).count();
    }
    Ok(correct as f64 / split.len() as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ClassifyHeader {
    spec: ClassifierSpec,
    config: ClassifyConfig,
    tasks: Vec<String>,
    epoch: usize,
    rng: ChaCha8Rng,
}

/// Interleaved training over several datasets, each with its own context.
pub struct ClassifyTrainer<S> {
    pub net: QNetwork<S>,
    pub adam: Adam<S>,
    spec: ClassifierSpec,
    config: ClassifyConfig,
    datasets: Vec<DatasetHandle>,
    contexts: Vec<ContextSignal>,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl<S: Scalar> ClassifyTrainer<S> {
    /// Datasets are resized to the spec's input size here.
    pub fn new(spec: &ClassifierSpec, config: &ClassifyConfig, datasets: &[DatasetHandle]) -> Result<Self> {
        config.validate()?;
        if datasets.is_empty() || datasets.len() != spec.task_count {
            return Err(Error::Config(format!(
                "{} datasets for a {}-task classifier",
                datasets.len(),
                spec.task_count
            )));
        }
        let arch = spec.architecture();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = ChaCha8Rng::seed_from_u64(rng.gen());
        let net = QNetwork::build(&arch, &mut init)?;
        let datasets = datasets.iter().map(|d| d.resized(spec.input_size)).collect();
        let contexts = (0..spec.task_count).map(|j| ContextSignal::one_hot(j, spec.task_count)).collect::<Result<_>>()?;
        Ok(Self {
            net,
            adam: Adam::new(config.adam),
            spec: spec.clone(),
            config: config.clone(),
            datasets,
            contexts,
            rng,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Changes the epoch budget, e.g. to extend a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
    }

    /// Test accuracy of every task with the current weights.
    pub fn test_accuracy(&mut self) -> Result<Vec<AccuracyRecord>> {
        let mut out = Vec::with_capacity(self.datasets.len());
        for (j, d) in self.datasets.iter().enumerate() {
            let accuracy = evaluate(&mut self.net, &d.test, &self.contexts[j], self.config.eval_batch)?;
            out.push(AccuracyRecord { epoch: self.epoch, task: d.name.clone(), split: "test".into(), accuracy });
        }
        Ok(out)
    }

    /// One epoch: every training example of every task once, alternating
    /// tasks every `interleave` batches. Returns training accuracy
    /// (measured on the fly) followed by test accuracy.
    pub fn run_epoch(&mut self) -> Result<Vec<AccuracyRecord>> {
        let px = self.net.spec().input_len();
        let bs = self.config.batch_size;
        let mut queues: Vec<Vec<Vec<usize>>> = self
            .datasets
            .iter()
            .map(|d| {
                let mut order: Vec<usize> = (0..d.train.len()).collect();
                order.shuffle(&mut self.rng);
                order.chunks(bs).rev().map(<[usize]>::to_vec).collect()
            })
            .collect();
        let mut correct = vec![0usize; self.datasets.len()];
        let mut seen = vec![0usize; self.datasets.len()];
        let mut task = 0;
        while queues.iter().any(|q| !q.is_empty()) {
            for _ in 0..self.config.interleave {
                let Some(chunk) = queues[task].pop() else { break };
                let (x, y) = gather::<S>(&self.datasets[task].train, px, &chunk);
                let logits = self.net.forward(&x, chunk.len(), &self.contexts[task], BnMode::Train, true)?;
                let classes = self.net.action_count();
                correct[task] += logits.chunks_exact(classes).zip(&y).filter(|(r, &l)| argmax(r) == l).count();
                seen[task] += chunk.len();
                let loss = cross_entropy(&logits, classes, &y)?;
                self.net.zero_grad();
                self.net.backward(&loss.grad, false);
                self.adam.step(&mut self.net.params_mut());
            }
            task = (task + 1) % self.datasets.len();
        }
        self.epoch += 1;
        let mut out: Vec<AccuracyRecord> = self
            .datasets
            .iter()
            .enumerate()
            .map(|(j, d)| AccuracyRecord {
                epoch: self.epoch,
                task: d.name.clone(),
                split: "train".into(),
                accuracy: correct[j] as f64 / seen[j].max(1) as f64,
            })
            .collect();
        out.extend(self.test_accuracy()?);
        Ok(out)
    }

    /// Parameters, optimizer moments, epoch and random stream. Datasets are
    /// not included; resuming reloads them by name.
    pub fn export_state(&self) -> Result<StateBundle> {
        let header = ClassifyHeader {
            spec: self.spec.clone(),
            config: self.config.clone(),
            tasks: self.datasets.iter().map(|d| d.name.clone()).collect(),
            epoch: self.epoch,
            rng: self.rng.clone(),
        };
        let mut out = StateBundle::new(&header)?;
        self.net.export_state("net", &mut out);
        export_adam(&self.adam, "adam", &mut out);
        Ok(out)
    }

    /// Restores a trainer from `state` using already-loaded datasets, which
    /// must match the saved task names.
    pub fn from_state(state: &StateBundle, datasets: &[DatasetHandle]) -> Result<Self> {
        let h: ClassifyHeader = state.header()?;
        let names: Vec<&str> = datasets.iter().map(|d| d.name.as_str()).collect();
        if names != h.tasks.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Config(format!("checkpoint tasks {:?} differ from {names:?}", h.tasks)));
        }
        let mut t = Self::new(&h.spec, &h.config, datasets)?;
        t.net.import_state("net", state)?;
        import_adam(&mut t.adam, "adam", state)?;
        t.epoch = h.epoch;
        t.rng = h.rng;
        Ok(t)
    }

    /// Dataset names of the checkpoint, for reloading before
    /// [`ClassifyTrainer::from_state`].
    pub fn saved_tasks(state: &StateBundle) -> Result<Vec<String>> {
        Ok(state.header::<ClassifyHeader>()?.tasks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Ten classes, each a bright square in a distinct position.
    fn toy(name: &str, per_class: usize, size: usize) -> DatasetHandle {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut split = |n: usize| {
            let mut s = Split { images: Vec::new(), labels: Vec::new() };
            for i in 0..n * CLASS_COUNT {
                let label = i % CLASS_COUNT;
                let mut img = vec![0u8; size * size];
                let (r, c) = (label / 5, label % 5);
                let cell = size / 5;
                for y in 0..cell {
                    for x in 0..cell {
                        img[(r * cell * 2 + y) * size + c * cell + x] = 200 + rng.gen_range(0..55);
                    }
                }
                s.images.extend(img);
                s.labels.push(label as u8);
            }
            s
        };
        DatasetHandle { name: name.into(), height: size, width: size, train: split(per_class), test: split(2) }
    }

    fn tiny_spec(tasks: usize) -> ClassifierSpec {
        ClassifierSpec { input_size: 36, fc_width: 32, task_count: tasks, t_sim: 2, ..ClassifierSpec::default() }
    }

    #[test]
    fn untrained_accuracy_near_chance() {
        let spec = tiny_spec(1);
        let mut t = ClassifyTrainer::<f32>::new(&spec, &ClassifyConfig::default(), &[toy("a", 20, 36)]).unwrap();
        let acc = t.test_accuracy().unwrap()[0].accuracy;
        assert!(acc <= 0.5, "{acc}");
    }

    #[test]
    fn learns_a_separable_toy_problem() {
        let spec = tiny_spec(2);
        let cfg = ClassifyConfig { epochs: 4, batch_size: 10, adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() }, ..ClassifyConfig::default() };
        let data = [toy("a", 10, 36), toy("b", 10, 36)];
        let mut t = ClassifyTrainer::<f32>::new(&spec, &cfg, &data).unwrap();
        let mut last = Vec::new();
        while !t.is_done() {
            last = t.run_epoch().unwrap();
        }
        let test: Vec<f64> = last.iter().filter(|r| r.split == "test").map(|r| r.accuracy).collect();
        assert_eq!(test.len(), 2);
        assert!(test.iter().all(|a| *a >= 0.9), "{last:?}");
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let spec = tiny_spec(1);
        let cfg = ClassifyConfig { epochs: 2, batch_size: 16, ..ClassifyConfig::default() };
        let data = [toy("a", 5, 36)];
        let mut whole = ClassifyTrainer::<f32>::new(&spec, &cfg, &data).unwrap();
        let a = [whole.run_epoch().unwrap(), whole.run_epoch().unwrap()];
        let mut first = ClassifyTrainer::<f32>::new(&spec, &cfg, &data).unwrap();
        let b0 = first.run_epoch().unwrap();
        let mut resumed = ClassifyTrainer::<f32>::from_state(&first.export_state().unwrap(), &data).unwrap();
        let b1 = resumed.run_epoch().unwrap();
        assert_eq!(a, [b0, b1]);
    }

    #[test]
    fn task_count_must_match() {
        assert!(ClassifyTrainer::<f32>::new(&tiny_spec(2), &ClassifyConfig::default(), &[toy("a", 1, 36)]).is_err());
    }

    #[test]
    fn resize_and_truncate() {
        let d = toy("a", 3, 40).resized(20).truncated(7, 100);
        assert_eq!((d.height, d.width), (20, 20));
        assert_eq!(d.train.len(), 7);
        assert_eq!(d.train.images.len(), 7 * 400);
        assert_eq!(d.test.len(), 20);
    }
}
