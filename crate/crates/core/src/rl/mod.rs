//! Deep-Q machinery: replay, exploration schedule, double-Q targets and the
//! round-robin multi-environment training loop.

mod replay;
mod trainer;

pub use replay::{ReplayBatch, ReplayBuffer, ReplayParts, Transition};
pub use trainer::{
    dqn_update, evaluate_policy, random_baseline, EnvSlot, EpisodeRecord, Trainer, TrainerCounters,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{argmax, QNetwork};
use crate::scalar::Scalar;
use crate::snn::ContextSignal;
use crate::tensor::{AdamConfig, BnMode};

/// Linear annealing of the exploration rate over a global frame counter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_frames: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self { start: 1.0, end: 0.1, decay_frames: 1_000_000 }
    }
}

impl EpsilonSchedule {
    pub fn at(&self, frame: u64) -> f64 {
        if self.decay_frames == 0 {
            return self.end;
        }
        let frac = (frame as f64 / self.decay_frames as f64).min(1.0);
        self.start - (self.start - self.end) * frac
    }
}

/// Batch-norm mode for inference: running statistics once they exist.
pub fn inference_mode<S: Scalar>(net: &QNetwork<S>) -> BnMode {
    if net.stats_initialized() {
        BnMode::Eval
    } else {
        BnMode::Batch
    }
}

/// With probability `eps` a uniform random action, otherwise the greedy one.
/// `q` is only evaluated on the greedy branch.
pub fn epsilon_greedy<R: Rng + ?Sized, S: Scalar>(
    q: impl FnOnce() -> Result<Vec<S>>,
    actions: usize,
    eps: f64,
    rng: &mut R,
) -> Result<usize> {
    if rng.gen::<f64>() < eps {
        Ok(rng.gen_range(0..actions))
    } else {
        Ok(argmax(&q()?))
    }
}

pub fn select_action<S: Scalar, R: Rng + ?Sized>(
    net: &mut QNetwork<S>,
    obs: &[S],
    ctx: &ContextSignal,
    eps: f64,
    rng: &mut R,
) -> Result<usize> {
    let actions = net.action_count();
    let mode = inference_mode(net);
    epsilon_greedy(|| net.q_values(obs, ctx, mode), actions, eps, rng)
}

/// Double-Q targets: `y = r` on terminal transitions, otherwise
/// `r + gamma · Q*(φ', argmax_a Q(φ', a))`.
pub fn compute_target<S: Scalar>(
    rewards: &[S],
    terminals: &[bool],
    q_online_next: &[S],
    q_target_next: &[S],
    actions: usize,
    gamma: S,
) -> Vec<S> {
    rewards
        .iter()
        .zip(terminals)
        .enumerate()
        .map(|(n, (&r, &terminal))| {
            if terminal {
                r
            } else {
                let row = n * actions..(n + 1) * actions;
                let a = argmax(&q_online_next[row.clone()]);
                r + gamma * q_target_next[row][a]
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub gamma: f64,
    pub target_sync: u64,
    /// Episodes in one environment before moving to the next.
    pub switch_period: u64,
    /// Transitions an environment's buffer needs before it is sampled.
    pub learning_start: usize,
    /// Global frame budget; `None` means four million per environment.
    pub total_frames: Option<u64>,
    pub seed: u64,
    pub clip_rewards: bool,
    pub replay_capacity: usize,
    pub epsilon: EpsilonSchedule,
    pub adam: AdamConfig,
    /// Update every environment's network on each training frame; when false
    /// only the active environment is sampled.
    pub train_all_envs: bool,
    /// Frames between training steps.
    pub train_interval: u64,
    pub frame_skip: usize,
    pub eval_epsilon: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            gamma: 0.99,
            target_sync: 10_000,
            switch_period: 25,
            learning_start: 1_000,
            total_frames: None,
            seed: 0,
            clip_rewards: true,
            replay_capacity: 1 << 20,
            epsilon: EpsilonSchedule::default(),
            adam: AdamConfig::default(),
            train_all_envs: true,
            train_interval: 1,
            frame_skip: 1,
            eval_epsilon: 0.05,
        }
    }
}

impl TrainerConfig {
    pub const FRAMES_PER_ENV: u64 = 4_000_000;

    pub fn frame_budget(&self, envs: usize) -> u64 {
        self.total_frames.unwrap_or(Self::FRAMES_PER_ENV * envs as u64)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, why: &str| Err(Error::Config(format!("{key}: {why}")));
        if self.batch_size == 0 {
            return fail("batch_size", "must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail("gamma", "must lie in (0, 1]");
        }
        if self.target_sync == 0 {
            return fail("target_sync", "must be positive");
        }
        if self.switch_period == 0 {
            return fail("switch_period", "must be positive");
        }
        if self.replay_capacity == 0 {
            return fail("replay_capacity", "must be positive");
        }
        if self.train_interval == 0 {
            return fail("train_interval", "must be positive");
        }
        if self.frame_skip == 0 {
            return fail("frame_skip", "must be positive");
        }
        let e = &self.epsilon;
        if !(0.0..=1.0).contains(&e.start) || !(0.0..=1.0).contains(&e.end) || e.end > e.start {
            return fail("epsilon", "need 0 <= end <= start <= 1");
        }
        if !(0.0..=1.0).contains(&self.eval_epsilon) {
            return fail("eval_epsilon", "must lie in [0, 1]");
        }
        if !(self.adam.lr > 0.0) {
            return fail("lr", "must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_anchors() {
        let s = EpsilonSchedule::default();
        assert_eq!(s.at(0), 1.0);
        assert!((s.at(500_000) - 0.55).abs() < 1e-12);
        assert!((s.at(1_000_000) - 0.1).abs() < 1e-12);
        assert!((s.at(7_000_000) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn greedy_picks_the_peak_and_breaks_ties_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut q = vec![0.0f32; 18];
        q[3] = 7.0;
        for _ in 0..50 {
            assert_eq!(epsilon_greedy(|| Ok(q.clone()), 18, 0.0, &mut rng).unwrap(), 3);
            assert_eq!(epsilon_greedy(|| Ok(vec![1.0f32; 18]), 18, 0.0, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut hist = [0usize; 18];
        let draws = 10_000;
        for _ in 0..draws {
            let a = epsilon_greedy::<_, f32>(|| unreachable!(), 18, 1.0, &mut rng).unwrap();
            hist[a] += 1;
        }
        let expected = draws as f64 / 18.0;
        let chi2: f64 = hist.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 17 degrees of freedom, p = 0.001
        assert!(chi2 < 40.79, "{chi2}");
    }

    #[test]
    fn target_examples() {
        let y = compute_target(&[1.0f64], &[true], &[0.0, 9.0], &[5.0, 5.0], 2, 0.99);
        assert_eq!(y, vec![1.0]);
        // online argmax is action 1; target evaluates it at 2
        let y = compute_target(&[1.0f64], &[false], &[0.0, 9.0], &[100.0, 2.0], 2, 0.99);
        assert!((y[0] - 2.98).abs() < 1e-12);
        let q = [0.5, 3.0, -1.0];
        let y = compute_target(&[0.0f64], &[false], &q, &q, 3, 0.5);
        assert_eq!(y, vec![1.5]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainerConfig::default().validate().is_ok());
        let bad = TrainerConfig { gamma: 1.5, ..TrainerConfig::default() };
        assert!(bad.validate().is_err());
    }
}
