//! Integrate-and-fire dynamics: a single-step state machine and a multi-step
//! layer that supports backpropagation through time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::spike::heaviside;
use crate::tensor::Surrogate;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    #[default]
    HardToZero,
    SubtractThreshold,
}

/// Membrane potentials of one layer of IF neurons.
#[derive(Clone, Debug, PartialEq)]
pub struct IfLayerState<S> {
    pub v: Vec<S>,
    pub v_th: S,
    pub reset: ResetMode,
}

impl<S: Scalar> IfLayerState<S> {
    pub fn new(neurons: usize, v_th: S, reset: ResetMode) -> Self {
        Self { v: vec![S::zero(); neurons], v_th, reset }
    }

    pub fn reset_potentials(&mut self) {
        self.v.iter_mut().for_each(|v| *v = S::zero());
    }

    /// Integrates one step of input current and returns the binary spikes.
    ///
    /// `modulation` is either one gain per neuron or a single gain shared by
    /// the layer.
    pub fn step(&mut self, input: &[S], modulation: Option<&[S]>) -> Result<Vec<S>> {
        let n = self.v.len();
        if input.len() != n {
            return Err(Error::dim("if_step", "input length", n, input.len()));
        }
        if let Some(g) = modulation {
            if g.len() != n && g.len() != 1 {
                return Err(Error::dim("if_step", "modulation length", n, g.len()));
            }
        }
        let mut spikes = vec![S::zero(); n];
        for i in 0..n {
            let gain = modulation.map_or(S::one(), |g| if g.len() == 1 { g[0] } else { g[i] });
            self.v[i] += input[i] * gain;
            if self.v[i] >= self.v_th {
                spikes[i] = S::one();
                self.v[i] = match self.reset {
                    ResetMode::HardToZero => S::zero(),
                    ResetMode::SubtractThreshold => self.v[i] - self.v_th,
                };
            }
        }
        Ok(spikes)
    }
}

#[derive(Clone, Debug)]
struct IfCache<S> {
    /// Pre-reset potentials, `[T, M]`.
    h: Vec<S>,
    steps: usize,
    constant_input: bool,
}

/// A layer of IF neurons run for `T` steps on a time-major `[T, M]` input.
#[derive(Clone, Debug)]
pub struct IfNeurons<S> {
    pub v_th: S,
    pub reset: ResetMode,
    pub surrogate: Surrogate,
    /// Replaces the step with the surrogate's smooth primitive. Only meant for
    /// finite-difference gradient checks.
    pub relaxed: bool,
    cache: Option<IfCache<S>>,
}

impl<S: Scalar> IfNeurons<S> {
    pub fn new(v_th: S, reset: ResetMode, surrogate: Surrogate) -> Self {
        Self { v_th, reset, surrogate, relaxed: false, cache: None }
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Runs `steps` steps from resting potential. With `constant_input` the
    /// input is a single `[M]` current injected at every step; otherwise it is
    /// `[T, M]`. Returns spikes `[T, M]`.
    pub fn forward(&mut self, input: &[S], steps: usize, constant_input: bool, cache: bool) -> Vec<S> {
        let m = if constant_input { input.len() } else { input.len() / steps.max(1) };
        let mut v = vec![S::zero(); m];
        let mut spikes = vec![S::zero(); steps * m];
        let mut hs = if cache { vec![S::zero(); steps * m] } else { Vec::new() };
        let (v_th, surrogate) = (self.v_th, self.surrogate);
        let relaxed = self.relaxed;
        let hard = self.reset == ResetMode::HardToZero;
        for t in 0..steps {
            let x = if constant_input { input } else { &input[t * m..(t + 1) * m] };
            let out = &mut spikes[t * m..(t + 1) * m];
            let hrow: &mut [S] = if cache { &mut hs[t * m..(t + 1) * m] } else { &mut [] };
            for i in 0..m {
                let h = v[i] + x[i];
                let s = if relaxed { surrogate.primitive(h - v_th) } else { heaviside(h - v_th) };
                out[i] = s;
                if cache {
                    hrow[i] = h;
                }
                v[i] = if hard { h * (S::one() - s) } else { h - s * v_th };
            }
        }
        self.cache = cache.then_some(IfCache { h: hs, steps, constant_input });
        spikes
    }

    /// Backpropagation through time, including the reset path. Returns the
    /// input gradient in the layout the forward pass received.
    pub fn backward(&mut self, grad_spikes: &[S]) -> Vec<S> {
        let cache = self.cache.take().expect("IF backward without cached forward");
        let steps = cache.steps;
        let m = cache.h.len() / steps.max(1);
        let mut gx = vec![S::zero(); if cache.constant_input { m } else { steps * m }];
        let (v_th, surrogate) = (self.v_th, self.surrogate);
        let relaxed = self.relaxed;
        let hard = self.reset == ResetMode::HardToZero;
        // gradient reaching the post-reset potential from the next step
        let mut gv = vec![S::zero(); m];
        for t in (0..steps).rev() {
            let hrow = &cache.h[t * m..(t + 1) * m];
            let grow = &grad_spikes[t * m..(t + 1) * m];
            for i in 0..m {
                let h = hrow[i];
                let x = h - v_th;
                let sd = surrogate.derivative(x);
                let dh = if hard {
                    let s = if relaxed { surrogate.primitive(x) } else { heaviside(x) };
                    let ds = grow[i] - gv[i] * h;
                    ds * sd + gv[i] * (S::one() - s)
                } else {
                    let ds = grow[i] - gv[i] * v_th;
                    ds * sd + gv[i]
                };
                gv[i] = dh;
            }
            if cache.constant_input {
                for (g, d) in gx.iter_mut().zip(&gv) {
                    *g += *d;
                }
            } else {
                gx[t * m..(t + 1) * m].copy_from_slice(&gv);
            }
        }
        gx
    }
}
