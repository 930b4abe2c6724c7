use rand::Rng;

use crate::envs::bytes_to_unit;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One replay record.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub phi: Vec<u8>,
    pub action: usize,
    pub reward: f32,
    pub phi_next: Vec<u8>,
    pub terminal: bool,
    pub env_index: usize,
}

/// A sampled minibatch with observations scaled to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ReplayBatch<S> {
    pub phi: Vec<S>,
    pub actions: Vec<usize>,
    pub rewards: Vec<S>,
    pub phi_next: Vec<S>,
    pub terminals: Vec<bool>,
}

impl<S> ReplayBatch<S> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Fixed-capacity FIFO ring of transitions. Storage grows on demand up to
/// the capacity.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_len: usize,
    phi: Vec<u8>,
    phi_next: Vec<u8>,
    actions: Vec<u8>,
    rewards: Vec<f32>,
    terminals: Vec<bool>,
    env_index: Vec<u16>,
    /// Slot the next push writes to once the ring is full.
    cursor: usize,
}

/// Flat view of a buffer's storage, for persistence.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayParts {
    pub capacity: usize,
    pub obs_len: usize,
    pub cursor: usize,
    pub phi: Vec<u8>,
    pub phi_next: Vec<u8>,
    pub actions: Vec<u8>,
    pub rewards: Vec<f32>,
    pub terminals: Vec<u8>,
    pub env_index: Vec<u16>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_len: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            obs_len,
            phi: Vec::new(),
            phi_next: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            terminals: Vec::new(),
            env_index: Vec::new(),
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn obs_len(&self) -> usize {
        self.obs_len
    }

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        if t.phi.len() != self.obs_len || t.phi_next.len() != self.obs_len {
            return Err(Error::dim("replay_push", "observation length", self.obs_len, t.phi.len()));
        }
        if t.action > u8::MAX as usize {
            return Err(Error::dim("replay_push", "action index", u8::MAX as usize, t.action));
        }
        let env = u16::try_from(t.env_index).map_err(|_| Error::Config("environment index too large".into()))?;
        if self.len() < self.capacity {
            self.phi.extend_from_slice(&t.phi);
            self.phi_next.extend_from_slice(&t.phi_next);
            self.actions.push(t.action as u8);
            self.rewards.push(t.reward);
            self.terminals.push(t.terminal);
            self.env_index.push(env);
        } else {
            let i = self.cursor;
            let o = self.obs_len;
            self.phi[i * o..(i + 1) * o].copy_from_slice(&t.phi);
            self.phi_next[i * o..(i + 1) * o].copy_from_slice(&t.phi_next);
            self.actions[i] = t.action as u8;
            self.rewards[i] = t.reward;
            self.terminals[i] = t.terminal;
            self.env_index[i] = env;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        Ok(())
    }

    fn slot(&self, logical: usize) -> usize {
        if self.len() < self.capacity {
            logical
        } else {
            (self.cursor + logical) % self.capacity
        }
    }

    /// The `i`-th oldest stored transition.
    pub fn get(&self, i: usize) -> Option<Transition> {
        (i < self.len()).then(|| self.at_slot(self.slot(i)))
    }

    fn at_slot(&self, s: usize) -> Transition {
        let o = self.obs_len;
        Transition {
            phi: self.phi[s * o..(s + 1) * o].to_vec(),
            action: self.actions[s] as usize,
            reward: self.rewards[s],
            phi_next: self.phi_next[s * o..(s + 1) * o].to_vec(),
            terminal: self.terminals[s],
            env_index: self.env_index[s] as usize,
        }
    }

    /// Uniform draws with replacement over the stored transitions, as
    /// positions in insertion order (0 = oldest).
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        assert!(!self.is_empty(), "sampling an empty replay buffer");
        (0..batch).map(|_| rng.gen_range(0..self.len())).collect()
    }

    /// Gathers a batch from insertion-order positions.
    pub fn batch<S: Scalar>(&self, indices: &[usize]) -> ReplayBatch<S> {
        let o = self.obs_len;
        let mut phi = Vec::with_capacity(indices.len() * o);
        let mut phi_next = Vec::with_capacity(indices.len() * o);
        let mut actions = Vec::with_capacity(indices.len());
        let mut rewards = Vec::with_capacity(indices.len());
        let mut terminals = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self.slot(i);
            phi.extend(bytes_to_unit::<S>(&self.phi[s * o..(s + 1) * o]));
            phi_next.extend(bytes_to_unit::<S>(&self.phi_next[s * o..(s + 1) * o]));
            actions.push(self.actions[s] as usize);
            rewards.push(S::lit(self.rewards[s] as f64));
            terminals.push(self.terminals[s]);
        }
        ReplayBatch { phi, actions, rewards, phi_next, terminals }
    }

    pub fn sample<S: Scalar, R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> ReplayBatch<S> {
        let idx = self.sample_indices(batch, rng);
        self.batch(&idx)
    }

    pub fn to_parts(&self) -> ReplayParts {
        ReplayParts {
            capacity: self.capacity,
            obs_len: self.obs_len,
            cursor: self.cursor,
            phi: self.phi.clone(),
            phi_next: self.phi_next.clone(),
            actions: self.actions.clone(),
            rewards: self.rewards.clone(),
            terminals: self.terminals.iter().map(|t| *t as u8).collect(),
            env_index: self.env_index.clone(),
        }
    }

    pub fn from_parts(p: ReplayParts) -> Result<Self> {
        let n = p.actions.len();
        let consistent = p.capacity > 0
            && n <= p.capacity
            && p.phi.len() == n * p.obs_len
            && p.phi_next.len() == n * p.obs_len
            && p.rewards.len() == n
            && p.terminals.len() == n
            && p.env_index.len() == n
            && p.cursor < p.capacity.max(1);
        if !consistent {
            return Err(Error::Config("inconsistent replay buffer state".into()));
        }
        Ok(Self {
            capacity: p.capacity,
            obs_len: p.obs_len,
            phi: p.phi,
            phi_next: p.phi_next,
            actions: p.actions,
            rewards: p.rewards,
            terminals: p.terminals.into_iter().map(|t| t != 0).collect(),
            env_index: p.env_index,
            cursor: p.cursor,
        })
    }
}
