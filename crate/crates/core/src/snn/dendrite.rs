//! Active dendrites: context-matched segments that gate a neuron's input
//! current by `sigmoid(max_j d_j·c)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DendriteSharing {
    /// One `J×C` bank whose gain is applied to every neuron of the layer.
    Shared,
    /// A separate `J×C` bank per neuron.
    #[default]
    PerNeuron,
}

/// One-hot task identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSignal {
    task_index: usize,
    len: usize,
}

impl ContextSignal {
    pub fn one_hot(task_index: usize, len: usize) -> Result<Self> {
        if task_index >= len {
            return Err(Error::dim("context", "task index", len, task_index));
        }
        Ok(Self { task_index, len })
    }

    pub fn task_index(&self) -> usize {
        self.task_index
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn to_vec<S: Scalar>(&self) -> Vec<S> {
        let mut c = vec![S::zero(); self.len];
        c[self.task_index] = S::one();
        c
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[derive(Clone, Debug)]
struct DendriteCache<S> {
    input: Vec<S>,
    rows: usize,
    context: Vec<S>,
    /// `(argmax segment, max activation)` per bank.
    winners: Vec<(usize, S)>,
}

/// Dendritic weights `[J, C]` (shared) or `[n, J, C]` (per neuron).
#[derive(Clone, Debug)]
pub struct DendriteBank<S> {
    pub weights: Tensor<S>,
    neurons: usize,
    segments: usize,
    context_dim: usize,
    sharing: DendriteSharing,
    cache: Option<DendriteCache<S>>,
}

impl<S: Scalar> DendriteBank<S> {
    /// Weights drawn uniformly from `[-1/sqrt(C), 1/sqrt(C)]`.
    pub fn new<R: Rng + ?Sized>(
        neurons: usize,
        segments: usize,
        context_dim: usize,
        sharing: DendriteSharing,
        rng: &mut R,
    ) -> Self {
        let shape = match sharing {
            DendriteSharing::Shared => vec![segments, context_dim],
            DendriteSharing::PerNeuron => vec![neurons, segments, context_dim],
        };
        let mut weights = Tensor::uniform(&shape, 1.0 / (context_dim as f64).sqrt(), rng);
        weights.set_requires_grad(true);
        Self { weights, neurons, segments, context_dim, sharing, cache: None }
    }

    /// Default policy: as many segments as tasks, context length = task count.
    pub fn for_tasks<R: Rng + ?Sized>(neurons: usize, tasks: usize, sharing: DendriteSharing, rng: &mut R) -> Self {
        Self::new(neurons, tasks, tasks, sharing, rng)
    }

    pub fn neurons(&self) -> usize {
        self.neurons
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn sharing(&self) -> DendriteSharing {
        self.sharing
    }

    fn banks(&self) -> usize {
        match self.sharing {
            DendriteSharing::Shared => 1,
            DendriteSharing::PerNeuron => self.neurons,
        }
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn winners(&self, c: &[S]) -> Vec<(usize, S)> {
        let (j, cd) = (self.segments, self.context_dim);
        let w = self.weights.data();
        (0..self.banks())
            .map(|b| {
                let mut best = (0, S::neg_infinity());
                for seg in 0..j {
                    let row = &w[(b * j + seg) * cd..(b * j + seg + 1) * cd];
                    let act: S = row.iter().zip(c).map(|(d, x)| *d * *x).sum();
                    if act > best.1 {
                        best = (seg, act);
                    }
                }
                best
            })
            .collect()
    }

    fn check_context(&self, ctx: &ContextSignal) -> Result<()> {
        if ctx.len() != self.context_dim {
            return Err(Error::dim("dendritic_modulation", "context length", self.context_dim, ctx.len()));
        }
        Ok(())
    }

    /// `max_j d_j·c` for each bank (one entry in shared mode).
    pub fn activations(&self, ctx: &ContextSignal) -> Result<Vec<S>> {
        self.check_context(ctx)?;
        Ok(self.winners(&ctx.to_vec()).into_iter().map(|(_, a)| a).collect())
    }

    /// Per-neuron gains `sigmoid(max_j d_j·c)`; shared mode repeats one value.
    pub fn gains(&self, ctx: &ContextSignal) -> Result<Vec<S>> {
        let acts = self.activations(ctx)?;
        Ok(match self.sharing {
            DendriteSharing::Shared => vec![sigmoid(acts[0]); self.neurons],
            DendriteSharing::PerNeuron => acts.into_iter().map(sigmoid).collect(),
        })
    }

    /// Scales `input [rows, neurons]` by the context gains.
    pub fn modulate(&mut self, input: &[S], ctx: &ContextSignal, cache: bool) -> Result<Vec<S>> {
        self.check_context(ctx)?;
        let n = self.neurons;
        if n == 0 || input.len() % n != 0 {
            return Err(Error::dim("dendritic_modulation", "neuron axis", n, input.len()));
        }
        let c = ctx.to_vec();
        let winners = self.winners(&c);
        let gains: Vec<S> = match self.sharing {
            DendriteSharing::Shared => vec![sigmoid(winners[0].1); n],
            DendriteSharing::PerNeuron => winners.iter().map(|w| sigmoid(w.1)).collect(),
        };
        let out: Vec<S> = input.iter().enumerate().map(|(i, x)| *x * gains[i % n]).collect();
        self.cache = cache.then(|| DendriteCache { input: input.to_vec(), rows: input.len() / n, context: c, winners });
        Ok(out)
    }

    /// Accumulates dendritic weight gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &[S]) -> Vec<S> {
        let cache = self.cache.take().expect("dendrite backward without cached forward");
        let n = self.neurons;
        let (j, cd) = (self.segments, self.context_dim);
        let gains: Vec<S> = match self.sharing {
            DendriteSharing::Shared => vec![sigmoid(cache.winners[0].1); n],
            DendriteSharing::PerNeuron => cache.winners.iter().map(|w| sigmoid(w.1)).collect(),
        };
        let mut dgain = vec![S::zero(); n];
        let mut gx = vec![S::zero(); grad_out.len()];
        for r in 0..cache.rows {
            for i in 0..n {
                let k = r * n + i;
                gx[k] = grad_out[k] * gains[i];
                dgain[i] += grad_out[k] * cache.input[k];
            }
        }
        let mut gw = vec![S::zero(); self.weights.numel()];
        for (b, &(seg, act)) in cache.winners.iter().enumerate() {
            let s = sigmoid(act);
            let dact = match self.sharing {
                DendriteSharing::Shared => dgain.iter().copied().sum::<S>(),
                DendriteSharing::PerNeuron => dgain[b],
            } * s
                * (S::one() - s);
            let row = &mut gw[(b * j + seg) * cd..(b * j + seg + 1) * cd];
            for (g, c) in row.iter_mut().zip(&cache.context) {
                *g += dact * *c;
            }
        }
        self.weights.accumulate_grad(&gw);
        gx
    }

    pub fn param_count(&self) -> usize {
        self.weights.numel()
    }
}
