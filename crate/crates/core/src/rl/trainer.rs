use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{bytes_to_unit, make_env, Env, FrameStack, Preprocessor, ACTION_COUNT};
use crate::error::{Error, Result};
use crate::models::{ArchitectureSpec, QNetwork};
use crate::rl::{compute_target, inference_mode, select_action, ReplayBatch, ReplayBuffer, ReplayParts, TrainerConfig, Transition};
use crate::scalar::Scalar;
use crate::snn::ContextSignal;
use crate::state::{export_adam, import_adam, ArrayData, NamedArray, StateBundle};
use crate::tensor::{mse_selected, Adam, BnMode};

/// One metrics line, written when an episode ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub frame: u64,
    pub env_index: usize,
    pub env: String,
    /// Episodes finished in this environment, including this one.
    pub episode: u64,
    /// Unclipped return.
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub length: u64,
    pub epsilon: f64,
    /// Mean TD loss over the updates made during the episode.
    pub loss_mean: Option<f64>,
}

/// One gradient step on `(y - Q(φ, a))²` for a sampled batch. Targets come
/// from the online net's argmax and the target net's value; the target net
/// is never modified.
pub fn dqn_update<S: Scalar>(
    online: &mut QNetwork<S>,
    target: &mut QNetwork<S>,
    adam: &mut Adam<S>,
    batch: &ReplayBatch<S>,
    ctx: &ContextSignal,
    gamma: S,
) -> Result<S> {
    let n = batch.len();
    let actions = online.action_count();
    let mode = inference_mode(online);
    let q_online_next = online.forward(&batch.phi_next, n, ctx, mode, false)?;
    let mode = inference_mode(target);
    let q_target_next = target.forward(&batch.phi_next, n, ctx, mode, false)?;
    let y = compute_target(&batch.rewards, &batch.terminals, &q_online_next, &q_target_next, actions, gamma);
    let q = online.forward(&batch.phi, n, ctx, BnMode::Train, true)?;
    let loss = mse_selected(&q, actions, &batch.actions, &y)?;
    online.zero_grad();
    online.backward(&loss.grad, false);
    adam.step(&mut online.params_mut());
    Ok(loss.loss)
}

fn stack_for(spec: &ArchitectureSpec) -> (Preprocessor, FrameStack) {
    let [c, h, w] = spec.input;
    (Preprocessor::new(h, w), FrameStack::new(c, h * w))
}

/// Returns of `episodes` evaluation episodes of `net` on a fresh game.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy<S: Scalar>(
    net: &mut QNetwork<S>,
    env_name: &str,
    ctx: &ContextSignal,
    episodes: usize,
    epsilon: f64,
    seed: u64,
    frame_skip: usize,
) -> Result<Vec<f64>> {
    let mut env = make_env(env_name, seed, frame_skip)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let (pre, mut stack) = stack_for(net.spec());
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        stack.reset(pre.frame(&env.reset()));
        let mut total = 0.0;
        loop {
            let obs: Vec<S> = stack.values();
            let a = select_action(net, &obs, ctx, epsilon, &mut rng)?;
            let r = env.step(a)?;
            total += r.reward as f64;
            if r.terminal {
                break;
            }
            stack.push(pre.frame(&r.observation));
        }
        returns.push(total);
    }
    Ok(returns)
}

/// Returns of a uniform-random policy.
pub fn random_baseline(env_name: &str, episodes: usize, seed: u64, frame_skip: usize) -> Result<Vec<f64>> {
    let mut env = make_env(env_name, seed, frame_skip)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        env.reset();
        let mut total = 0.0;
        loop {
            let r = env.step(rng.gen_range(0..ACTION_COUNT))?;
            total += r.reward as f64;
            if r.terminal {
                break;
            }
        }
        returns.push(total);
    }
    Ok(returns)
}

/// An environment with its frame stack and replay memory.
pub struct EnvSlot {
    pub name: String,
    pub env: Box<dyn Env>,
    pub stack: FrameStack,
    pub replay: ReplayBuffer,
    episode_return: f64,
    episode_length: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainerCounters {
    /// Global frame counter shared by every environment.
    pub frame: u64,
    pub active_env: usize,
    pub episodes_since_switch: u64,
    /// Finished episodes per environment.
    pub episodes: Vec<u64>,
    pub train_steps: u64,
    pub target_syncs: u64,
    loss_sum: f64,
    loss_count: u64,
}

#[derive(Serialize, Deserialize)]
struct EnvHeader {
    name: String,
    state: serde_json::Value,
    episode_return: f64,
    episode_length: u64,
}

#[derive(Serialize, Deserialize)]
struct TrainerHeader {
    spec: ArchitectureSpec,
    config: TrainerConfig,
    counters: TrainerCounters,
    rng: ChaCha8Rng,
    envs: Vec<EnvHeader>,
    replay_included: bool,
}

/// Round-robin multi-environment deep-Q training with one shared network.
///
/// The agent acts in the active environment with that environment's task
/// context; every training frame each environment whose memory has reached
/// the learning threshold contributes one update with its own context.
pub struct Trainer<S> {
    pub online: QNetwork<S>,
    pub target: QNetwork<S>,
    pub adam: Adam<S>,
    pub slots: Vec<EnvSlot>,
    config: TrainerConfig,
    preprocess: Preprocessor,
    contexts: Vec<ContextSignal>,
    rng: ChaCha8Rng,
    counters: TrainerCounters,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(spec: &ArchitectureSpec, config: &TrainerConfig, env_names: &[String]) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        if env_names.is_empty() {
            return Err(Error::Config("at least one environment is required".into()));
        }
        if spec.action_count != ACTION_COUNT {
            return Err(Error::Config(format!("environments expose {ACTION_COUNT} actions, spec has {}", spec.action_count)));
        }
        let ctx_len = if spec.kind.has_dendrites() { spec.task_count } else { env_names.len() };
        if env_names.len() > ctx_len {
            return Err(Error::Config(format!(
                "{} environments but the network has {} task contexts",
                env_names.len(),
                ctx_len
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = ChaCha8Rng::seed_from_u64(rng.gen());
        let online = QNetwork::build(spec, &mut init)?;
        let target = online.snapshot();
        let (preprocess, stack) = stack_for(spec);
        let mut slots = Vec::with_capacity(env_names.len());
        for name in env_names {
            let mut env = make_env(name, rng.gen(), config.frame_skip)?;
            let mut stack = stack.clone();
            stack.reset(preprocess.frame(&env.reset()));
            slots.push(EnvSlot {
                name: name.clone(),
                env,
                stack,
                replay: ReplayBuffer::new(config.replay_capacity, spec.input_len()),
                episode_return: 0.0,
                episode_length: 0,
            });
        }
        let contexts = (0..env_names.len()).map(|j| ContextSignal::one_hot(j, ctx_len)).collect::<Result<_>>()?;
        Ok(Self {
            online,
            target,
            adam: Adam::new(config.adam),
            slots,
            config: config.clone(),
            preprocess,
            contexts,
            rng,
            counters: TrainerCounters { episodes: vec![0; env_names.len()], ..TrainerCounters::default() },
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn counters(&self) -> &TrainerCounters {
        &self.counters
    }

    pub fn context(&self, env_index: usize) -> &ContextSignal {
        &self.contexts[env_index]
    }

    pub fn frame_budget(&self) -> u64 {
        self.config.frame_budget(self.slots.len())
    }

    pub fn is_done(&self) -> bool {
        self.counters.frame >= self.frame_budget()
    }

    /// Changes the global frame budget, e.g. to extend a resumed run.
    pub fn set_total_frames(&mut self, total: Option<u64>) {
        self.config.total_frames = total;
    }

    /// Runs up to `frames` frames without exceeding the budget and returns
    /// how many ran.
    pub fn run_frames(&mut self, frames: u64, sink: &mut dyn FnMut(&EpisodeRecord) -> Result<()>) -> Result<u64> {
        let mut done = 0;
        while done < frames && !self.is_done() {
            self.step_frame(sink)?;
            done += 1;
        }
        Ok(done)
    }

    pub fn step_frame(&mut self, sink: &mut dyn FnMut(&EpisodeRecord) -> Result<()>) -> Result<()> {
        let i = self.counters.active_env;
        let epsilon = self.config.epsilon.at(self.counters.frame);
        let slot = &mut self.slots[i];
        let phi = slot.stack.bytes();
        let obs: Vec<S> = bytes_to_unit(&phi);
        let action = select_action(&mut self.online, &obs, &self.contexts[i], epsilon, &mut self.rng)?;
        let step = slot.env.step(action)?;
        slot.episode_return += step.reward as f64;
        slot.episode_length += 1;
        let reward = if self.config.clip_rewards { step.reward.clamp(-1.0, 1.0) } else { step.reward };
        slot.stack.push(self.preprocess.frame(&step.observation));
        let phi_next = slot.stack.bytes();
        slot.replay.push(&Transition { phi, action, reward, phi_next, terminal: step.terminal, env_index: i })?;
        self.counters.frame += 1;

        if self.counters.frame % self.config.train_interval == 0 {
            self.train_step()?;
        }

        if step.terminal {
            self.finish_episode(i, epsilon, sink)?;
        }

        if self.counters.frame % self.config.target_sync == 0 {
            self.target.copy_from(&self.online);
            self.counters.target_syncs += 1;
        }
        Ok(())
    }

    /// One update per eligible environment. Returns the losses.
    pub fn train_step(&mut self) -> Result<Vec<(usize, S)>> {
        let threshold = self.config.learning_start.max(self.config.batch_size);
        let gamma = S::lit(self.config.gamma);
        let envs: Vec<usize> = if self.config.train_all_envs {
            (0..self.slots.len()).collect()
        } else {
            vec![self.counters.active_env]
        };
        let mut losses = Vec::new();
        for j in envs {
            if self.slots[j].replay.len() < threshold {
                continue;
            }
            let batch = self.slots[j].replay.sample::<S, _>(self.config.batch_size, &mut self.rng);
            let loss = dqn_update(&mut self.online, &mut self.target, &mut self.adam, &batch, &self.contexts[j], gamma)?;
            self.counters.train_steps += 1;
            self.counters.loss_sum += loss.as_f64();
            self.counters.loss_count += 1;
            losses.push((j, loss));
        }
        Ok(losses)
    }

    fn finish_episode(&mut self, i: usize, epsilon: f64, sink: &mut dyn FnMut(&EpisodeRecord) -> Result<()>) -> Result<()> {
        let c = &mut self.counters;
        c.episodes[i] += 1;
        let slot = &mut self.slots[i];
        let record = EpisodeRecord {
            frame: c.frame,
            env_index: i,
            env: slot.name.clone(),
            episode: c.episodes[i],
            episode_return: slot.episode_return,
            length: slot.episode_length,
            epsilon,
            loss_mean: (c.loss_count > 0).then(|| c.loss_sum / c.loss_count as f64),
        };
        c.loss_sum = 0.0;
        c.loss_count = 0;
        slot.episode_return = 0.0;
        slot.episode_length = 0;
        slot.stack.reset(self.preprocess.frame(&slot.env.reset()));
        c.episodes_since_switch += 1;
        if c.episodes_since_switch == self.config.switch_period {
            c.active_env = (c.active_env + 1) % self.slots.len();
            c.episodes_since_switch = 0;
        }
        sink(&record)
    }

    /// Evaluation returns of the online network on a fresh copy of
    /// environment `env_index`.
    pub fn evaluate(&mut self, env_index: usize, episodes: usize, seed: u64) -> Result<Vec<f64>> {
        let name = self.slots[env_index].name.clone();
        let ctx = self.contexts[env_index];
        let eps = self.config.eval_epsilon;
        evaluate_policy(&mut self.online, &name, &ctx, episodes, eps, seed, self.config.frame_skip)
    }

    /// Complete training state. Without the replay memories a restored run
    /// continues correctly but is no longer bitwise identical to an
    /// uninterrupted one.
    pub fn export_state(&self, include_replay: bool) -> Result<StateBundle> {
        let envs = self
            .slots
            .iter()
            .map(|s| {
                Ok(EnvHeader {
                    name: s.name.clone(),
                    state: s.env.save_state()?,
                    episode_return: s.episode_return,
                    episode_length: s.episode_length,
                })
            })
            .collect::<Result<_>>()?;
        let header = TrainerHeader {
            spec: self.online.spec().clone(),
            config: self.config.clone(),
            counters: self.counters.clone(),
            rng: self.rng.clone(),
            envs,
            replay_included: include_replay,
        };
        let mut out = StateBundle::new(&header)?;
        self.online.export_state("online", &mut out);
        self.target.export_state("target", &mut out);
        export_adam(&self.adam, "adam", &mut out);
        for (j, s) in self.slots.iter().enumerate() {
            out.push(NamedArray::flat(format!("env{j}.stack"), ArrayData::U8(s.stack.bytes())));
            if include_replay {
                let p = s.replay.to_parts();
                let meta = vec![p.capacity as u64, p.obs_len as u64, p.cursor as u64];
                out.push(NamedArray::flat(format!("replay{j}.meta"), ArrayData::U64(meta)));
                out.push(NamedArray::flat(format!("replay{j}.phi"), ArrayData::U8(p.phi)));
                out.push(NamedArray::flat(format!("replay{j}.phi_next"), ArrayData::U8(p.phi_next)));
                out.push(NamedArray::flat(format!("replay{j}.actions"), ArrayData::U8(p.actions)));
                out.push(NamedArray::flat(format!("replay{j}.rewards"), ArrayData::F32(p.rewards)));
                out.push(NamedArray::flat(format!("replay{j}.terminals"), ArrayData::U8(p.terminals)));
                let env_index = p.env_index.iter().map(|&e| e as u64).collect();
                out.push(NamedArray::flat(format!("replay{j}.env_index"), ArrayData::U64(env_index)));
            }
        }
        Ok(out)
    }

    pub fn from_state(bundle: &StateBundle) -> Result<Self> {
        let h: TrainerHeader = bundle.header()?;
        let names: Vec<String> = h.envs.iter().map(|e| e.name.clone()).collect();
        let mut t = Self::new(&h.spec, &h.config, &names)?;
        t.online.import_state("online", bundle)?;
        t.target.import_state("target", bundle)?;
        import_adam(&mut t.adam, "adam", bundle)?;
        let [c, hh, ww] = h.spec.input;
        for (j, (slot, eh)) in t.slots.iter_mut().zip(&h.envs).enumerate() {
            slot.env.load_state(&eh.state)?;
            slot.episode_return = eh.episode_return;
            slot.episode_length = eh.episode_length;
            slot.stack = FrameStack::from_bytes(c, hh * ww, bundle.bytes(&format!("env{j}.stack"))?);
            if h.replay_included {
                let meta = bundle.words(&format!("replay{j}.meta"))?;
                let [capacity, obs_len, cursor] = meta else {
                    return Err(Error::Config(format!("replay{j}.meta must hold three values")));
                };
                let parts = ReplayParts {
                    capacity: *capacity as usize,
                    obs_len: *obs_len as usize,
                    cursor: *cursor as usize,
                    phi: bundle.bytes(&format!("replay{j}.phi"))?.to_vec(),
                    phi_next: bundle.bytes(&format!("replay{j}.phi_next"))?.to_vec(),
                    actions: bundle.bytes(&format!("replay{j}.actions"))?.to_vec(),
                    rewards: bundle.f32s(&format!("replay{j}.rewards"))?.to_vec(),
                    terminals: bundle.bytes(&format!("replay{j}.terminals"))?.to_vec(),
                    env_index: bundle
                        .words(&format!("replay{j}.env_index"))?
                        .iter()
                        .map(|&e| e as u16)
                        .collect(),
                };
                slot.replay = ReplayBuffer::from_parts(parts)?;
            }
        }
        t.counters = h.counters;
        t.rng = h.rng;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ArchKind;
    use crate::rl::EpsilonSchedule;

    fn tiny_spec(kind: ArchKind) -> ArchitectureSpec {
        ArchitectureSpec { input: [2, 36, 36], fc_width: 16, t_sim: 2, ..ArchitectureSpec::new(kind) }
    }

    fn tiny_config() -> TrainerConfig {
        TrainerConfig {
            batch_size: 4,
            learning_start: 8,
            target_sync: 50,
            switch_period: 2,
            replay_capacity: 500,
            total_frames: Some(400),
            epsilon: EpsilonSchedule { decay_frames: 300, ..EpsilonSchedule::default() },
            ..TrainerConfig::default()
        }
    }

    fn names() -> Vec<String> {
        vec!["minicatch".into(), "minienduro".into()]
    }

    fn run(trainer: &mut Trainer<f32>, frames: u64) -> Vec<EpisodeRecord> {
        let mut out = Vec::new();
        trainer
            .run_frames(frames, &mut |r| {
                out.push(r.clone());
                Ok(())
            })
            .unwrap();
        out
    }

    #[test]
    fn environments_visited_in_blocks() {
        let catch = vec!["minicatch".to_string(), "minicatch".to_string()];
        let mut t = Trainer::<f32>::new(&tiny_spec(ArchKind::MtsparkAd), &tiny_config(), &catch).unwrap();
        let records = run(&mut t, 400);
        assert!(records.len() >= 6, "{}", records.len());
        let order: Vec<usize> = records.iter().map(|r| r.env_index).collect();
        for (k, env) in order.iter().enumerate() {
            assert_eq!(*env, (k / 2) % 2, "{order:?}");
        }
        assert_eq!(t.counters().target_syncs, 8);
        assert!(t.counters().train_steps > 0);
    }

    #[test]
    fn same_seed_same_records() {
        let spec = tiny_spec(ArchKind::DsqnD);
        let a = run(&mut Trainer::<f32>::new(&spec, &tiny_config(), &names()).unwrap(), 150);
        let b = run(&mut Trainer::<f32>::new(&spec, &tiny_config(), &names()).unwrap(), 150);
        assert!(!a.is_empty());
        assert_eq!(a, b);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let spec = tiny_spec(ArchKind::MtsparkAd);
        let mut whole = Trainer::<f32>::new(&spec, &tiny_config(), &names()).unwrap();
        let expected = run(&mut whole, 200);
        let mut first = Trainer::<f32>::new(&spec, &tiny_config(), &names()).unwrap();
        let mut got = run(&mut first, 90);
        let state = first.export_state(true).unwrap();
        let mut resumed = Trainer::<f32>::from_state(&state).unwrap();
        got.extend(run(&mut resumed, 110));
        assert_eq!(got, expected);
        let obs = vec![0.5f32; spec.input_len()];
        let ctx = ContextSignal::one_hot(0, 3).unwrap();
        let qa = whole.online.q_values(&obs, &ctx, BnMode::Eval).unwrap();
        let qb = resumed.online.q_values(&obs, &ctx, BnMode::Eval).unwrap();
        assert_eq!(qa, qb);
    }

    #[test]
    fn nothing_trains_below_threshold() {
        let cfg = TrainerConfig { learning_start: 1_000, ..tiny_config() };
        let mut t = Trainer::<f32>::new(&tiny_spec(ArchKind::Dqn), &cfg, &names()).unwrap();
        let before: Vec<Vec<f32>> = t.online.named_params().iter().map(|(_, p)| p.data().to_vec()).collect();
        run(&mut t, 100);
        let after: Vec<Vec<f32>> = t.online.named_params().iter().map(|(_, p)| p.data().to_vec()).collect();
        assert_eq!(before, after);
        assert_eq!(t.counters().train_steps, 0);
    }

    #[test]
    fn too_many_environments_rejected() {
        let spec = ArchitectureSpec { task_count: 1, ..tiny_spec(ArchKind::MtsparkAd) };
        assert!(Trainer::<f32>::new(&spec, &tiny_config(), &names()).is_err());
    }

    #[test]
    fn random_baseline_is_deterministic() {
        let a = random_baseline("minicatch", 5, 3, 1).unwrap();
        assert_eq!(a, random_baseline("minicatch", 5, 3, 1).unwrap());
        assert!(a.iter().all(|r| *r >= 0.0));
    }
}
